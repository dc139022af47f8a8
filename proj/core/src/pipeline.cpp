#include "dsee/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <set>

#include "dsee/adapter.hpp"
#include "dsee/pruning.hpp"

namespace dsee {

// ---- optimizer ---------------------------------------------------------------

void adamw_step(const std::vector<ParamView>& params, const GradientSet& grads,
                AdamWState& state, const AdamWParams& hp) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (const ParamView& param : params) {
        const GradBuffer& grad = grads.at(param.name);
        if (grad.values.size() != param.size) {
            throw TrainingError("gradient size mismatch for '" + param.name + "'");
        }
        auto& m = state.m[param.name];
        auto& v = state.v[param.name];
        if (m.empty()) m.assign(param.size, 0.0);
        if (v.empty()) v.assign(param.size, 0.0);
        for (std::size_t i = 0; i < param.size; ++i) {
            const double g = grad.values[i];
            if (!std::isfinite(g)) {
                throw TrainingError("non-finite gradient in '" + param.name + "' at index " +
                                    std::to_string(i));
            }
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            double p = param.data[i];
            p -= hp.lr * hp.weight_decay * p;
            p -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
            if (!std::isfinite(p)) {
                throw TrainingError("non-finite parameter in '" + param.name + "' after update");
            }
            param.data[i] = static_cast<float>(p);
        }
    }
}

double linear_decay_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * (1.0 - frac);
}

// ---- tasks -------------------------------------------------------------------

TaskKind parse_task_kind(const std::string& tag) {
    if (tag == "majority") return TaskKind::Majority;
    if (tag == "keycopy") return TaskKind::KeyCopy;
    throw ParameterError("unknown task kind '" + tag + "'");
}

std::string task_kind_name(TaskKind kind) {
    return kind == TaskKind::Majority ? "majority" : "keycopy";
}

namespace {

int majority_label(const std::int32_t* seq, std::size_t len, int n_classes) {
    std::vector<int> counts(n_classes, 0);
    std::vector<std::size_t> first_pos(n_classes, len);
    for (std::size_t t = 0; t < len; ++t) {
        const int c = seq[t];
        if (first_pos[c] == len) first_pos[c] = t;
        ++counts[c];
    }
    int best = 0;
    for (int c = 1; c < n_classes; ++c) {
        if (counts[c] > counts[best] ||
            (counts[c] == counts[best] && first_pos[c] < first_pos[best])) {
            best = c;
        }
    }
    return best;
}

} // namespace

TaskData make_task(const TaskSpec& spec, std::uint64_t seed) {
    if (spec.seq_len <= 0 || spec.n_classes <= 1) {
        throw ParameterError("make_task: need seq_len > 0 and n_classes > 1");
    }
    if (spec.kind == TaskKind::KeyCopy &&
        (spec.key_position < 0 || spec.key_position >= spec.seq_len)) {
        throw ParameterError("make_task: key_position outside sequence");
    }
    const std::size_t needed = spec.train_size + spec.eval_size;
    if (needed == 0) {
        throw ParameterError("make_task: empty dataset requested");
    }

    Rng base(seed);
    Rng perm_rng = base.derive("permutation");
    std::vector<int> perm(spec.n_classes);
    for (int c = 0; c < spec.n_classes; ++c) perm[c] = c;
    for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[perm_rng.bounded(i)]);
    }

    Rng sample_rng = base.derive("samples");
    std::set<std::vector<std::int32_t>> seen;
    std::vector<std::vector<std::int32_t>> sequences;
    sequences.reserve(needed);
    std::size_t attempts = 0;
    const std::size_t max_attempts = 128 * needed + 1024;
    while (sequences.size() < needed) {
        if (++attempts > max_attempts) {
            throw PipelineError("make_task: sequence space too small for disjoint splits");
        }
        std::vector<std::int32_t> seq(spec.seq_len);
        for (auto& tok : seq) {
            tok = static_cast<std::int32_t>(sample_rng.bounded(spec.n_classes));
        }
        if (seen.insert(seq).second) {
            sequences.push_back(std::move(seq));
        }
    }

    auto build = [&](std::size_t start, std::size_t count) {
        Dataset data;
        data.tokens.batch = count;
        data.tokens.seq = spec.seq_len;
        data.tokens.ids.reserve(count * spec.seq_len);
        data.labels.reserve(count);
        for (std::size_t i = start; i < start + count; ++i) {
            const auto& seq = sequences[i];
            data.tokens.ids.insert(data.tokens.ids.end(), seq.begin(), seq.end());
            if (spec.kind == TaskKind::Majority) {
                data.labels.push_back(majority_label(seq.data(), seq.size(), spec.n_classes));
            } else {
                data.labels.push_back(perm[seq[spec.key_position]]);
            }
        }
        return data;
    };
    TaskData task;
    task.train = build(0, spec.train_size);
    task.eval = build(spec.train_size, spec.eval_size);
    return task;
}

// ---- config ------------------------------------------------------------------

PruneMode parse_prune_mode(const std::string& tag) {
    if (tag == "unstructured") return PruneMode::Unstructured;
    if (tag == "structured") return PruneMode::Structured;
    throw ParameterError("unknown pruning mode '" + tag + "'");
}

std::string prune_mode_name(PruneMode mode) {
    return mode == PruneMode::Unstructured ? "unstructured" : "structured";
}

namespace {

const std::vector<std::string> kProjectionTags = {"q", "k", "v", "o"};

bool has_tag(const std::vector<std::string>& tags, const std::string& tag) {
    return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

void validate_projections(const std::vector<std::string>& tags, const char* what) {
    for (const auto& tag : tags) {
        if (!has_tag(kProjectionTags, tag)) {
            throw ParameterError(std::string(what) + ": unknown projection '" + tag + "'");
        }
    }
}

} // namespace

void PipelineConfig::validate() const {
    model.validate();
    validate_projections(adapter.uv_projections, "adapter.uv_projections");
    validate_projections(adapter.s2_projections, "adapter.s2_projections");
    if (adapter.rank > static_cast<std::size_t>(model.d_model)) {
        throw ParameterError("adapter.rank exceeds d_model");
    }
    if (adapter.n_keep > static_cast<std::size_t>(model.d_model) *
                             static_cast<std::size_t>(model.d_model)) {
        throw ParameterError("adapter.n_keep exceeds projection size");
    }
    if (!(pruning.sparsity >= 0.0 && pruning.sparsity < 1.0)) {
        throw ParameterError("pruning.sparsity must lie in [0, 1)");
    }
    if (!(pruning.head_ratio >= 0.0 && pruning.head_ratio < 1.0) ||
        !(pruning.ffn_ratio >= 0.0 && pruning.ffn_ratio < 1.0)) {
        throw ParameterError("pruning ratios must lie in [0, 1)");
    }
    if (pruning.lambda_l1 < 0.0) {
        throw ParameterError("pruning.lambda_l1 must be non-negative");
    }
    if (optimizer.learning_rate <= 0.0 || optimizer.eps <= 0.0) {
        throw ParameterError("optimizer.learning_rate and eps must be positive");
    }
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
        !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
        throw ParameterError("optimizer betas must lie in [0, 1)");
    }
    if (optimizer.weight_decay < 0.0) {
        throw ParameterError("optimizer.weight_decay must be non-negative");
    }
    if (optimizer.batch_size < 1) {
        throw ParameterError("optimizer.batch_size must be at least 1");
    }
    if (optimizer.pretrain_epochs < 1 || optimizer.epochs_stage1 < 1 ||
        optimizer.epochs_stage3 < 1) {
        throw ParameterError("pretrain and stage I/III epochs must be at least 1");
    }
    if (optimizer.epochs_stage2 < 0) {
        throw ParameterError("epochs_stage2 must be non-negative");
    }
    if (task.train_size == 0 || task.eval_size == 0) {
        throw ParameterError("task sizes must be positive");
    }
    if (model.n_classes > model.vocab_size) {
        throw ParameterError("task classes exceed vocab size");
    }
    if (task.kind == TaskKind::KeyCopy &&
        (task.key_position < 0 || task.key_position >= model.seq_len)) {
        throw ParameterError("task.key_position outside sequence");
    }
}

TaskSpec PipelineConfig::task_spec() const {
    TaskSpec spec;
    spec.kind = task.kind;
    spec.seq_len = model.seq_len;
    spec.n_classes = model.n_classes;
    spec.key_position = task.key_position;
    spec.train_size = task.train_size;
    spec.eval_size = task.eval_size;
    return spec;
}

// ---- training loop -----------------------------------------------------------

bool TrainPlan::trains(ParamKind kind) const {
    switch (kind) {
        case ParamKind::Pretrained: return dense;
        case ParamKind::AdapterU:
        case ParamKind::AdapterV:
        case ParamKind::AdapterS2: return adapters;
        case ParamKind::Gate: return gates;
        case ParamKind::Classifier: return classifier;
    }
    return false;
}

namespace {

Dataset slice_dataset(const Dataset& data, const std::vector<std::size_t>& order,
                      std::size_t start, std::size_t count) {
    Dataset out;
    out.tokens.batch = count;
    out.tokens.seq = data.tokens.seq;
    out.tokens.ids.reserve(count * data.tokens.seq);
    out.labels.reserve(count);
    for (std::size_t i = start; i < start + count; ++i) {
        const std::size_t row = order[i];
        const auto* begin = data.tokens.ids.data() + row * data.tokens.seq;
        out.tokens.ids.insert(out.tokens.ids.end(), begin, begin + data.tokens.seq);
        out.labels.push_back(data.labels[row]);
    }
    return out;
}

struct TrainOutcome {
    std::vector<double> losses;
    std::uint64_t steps = 0;
};

// Runs `epochs` epochs of AdamW over the dataset; the learning rate decays
// linearly to zero across the planned step budget. epoch_hook, when set, is
// called after each epoch and may stop training early.
TrainOutcome train_stage(ToyTransformer& model, const Dataset& data,
                         const OptimizerConfig& opt, const TrainPlan& plan, double lambda_l1,
                         int epochs, Rng order_rng,
                         const std::function<bool(int)>& epoch_hook = nullptr) {
    const std::size_t batch = opt.batch_size;
    const std::size_t steps_per_epoch = data.size() / batch;
    if (steps_per_epoch == 0) {
        throw PipelineError("train set smaller than one batch");
    }
    std::vector<ParamView> trainable;
    for (ParamView& view : named_parameters(model)) {
        if (plan.trains(view.kind)) trainable.push_back(view);
    }
    if (trainable.empty()) {
        throw PipelineError("stage has no trainable parameters");
    }

    AdamWParams hp;
    hp.beta1 = opt.beta1;
    hp.beta2 = opt.beta2;
    hp.eps = opt.eps;
    hp.weight_decay = opt.weight_decay;
    AdamWState state;

    TrainOutcome outcome;
    const std::uint64_t total_steps =
        static_cast<std::uint64_t>(epochs) * steps_per_epoch;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::uint64_t step_idx = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.bounded(i)]);
        }
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            Dataset minibatch = slice_dataset(data, order, s * batch, batch);
            BackwardResult back = backward(model, minibatch.tokens, minibatch.labels, lambda_l1);
            hp.lr = opt.linear_decay
                        ? linear_decay_lr(opt.learning_rate, step_idx, total_steps)
                        : opt.learning_rate;
            adamw_step(trainable, back.grads, state, hp);
            outcome.losses.push_back(back.loss);
            ++step_idx;
        }
        if (epoch_hook && epoch_hook(epoch)) break;
    }
    outcome.steps = step_idx;
    return outcome;
}

constexpr std::size_t kEvalChunk = 256;

AdaptedLinear& projection_of(EncoderLayer& layer, const std::string& tag) {
    if (tag == "q") return layer.wq;
    if (tag == "k") return layer.wk;
    if (tag == "v") return layer.wv;
    return layer.wo;
}

const AdaptedLinear& projection_of(const EncoderLayer& layer, const std::string& tag) {
    return projection_of(const_cast<EncoderLayer&>(layer), tag);
}

} // namespace

double evaluate(const ToyTransformer& model, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t correct_weighted = 0;
    for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
        const std::size_t count = std::min(kEvalChunk, data.size() - start);
        Dataset chunk = slice_dataset(data, order, start, count);
        const double acc = eval_accuracy(model, chunk.tokens, chunk.labels);
        correct_weighted += static_cast<std::size_t>(std::lround(acc * count));
    }
    return static_cast<double>(correct_weighted) / static_cast<double>(data.size());
}

// ---- budget ------------------------------------------------------------------

namespace {

struct PlannedDims {
    std::uint64_t kept_heads;
    std::uint64_t kept_ffn;
    std::uint64_t attn_rows; // q/k/v output rows after structured pruning
};

PlannedDims planned_dims(const PipelineConfig& cfg) {
    PlannedDims dims;
    const std::uint64_t heads = cfg.model.n_heads;
    const std::uint64_t d_ff = cfg.model.d_ff;
    if (cfg.pruning.mode == PruneMode::Structured) {
        dims.kept_heads = heads - static_cast<std::uint64_t>(
                                      std::floor(cfg.pruning.head_ratio * static_cast<double>(heads)));
        dims.kept_ffn = d_ff - static_cast<std::uint64_t>(
                                   std::floor(cfg.pruning.ffn_ratio * static_cast<double>(d_ff)));
    } else {
        dims.kept_heads = heads;
        dims.kept_ffn = d_ff;
    }
    dims.attn_rows = dims.kept_heads * (cfg.model.d_model / cfg.model.n_heads);
    return dims;
}

ArchSpec arch_of(const ToyTransformerConfig& model_cfg, int head_dim) {
    ArchSpec arch;
    arch.n_layers = model_cfg.n_layers;
    arch.d_model = model_cfg.d_model;
    arch.n_heads = model_cfg.n_heads;
    arch.head_dim = head_dim;
    arch.d_ff = model_cfg.d_ff;
    arch.n_classes = model_cfg.n_classes;
    return arch;
}

std::uint64_t dense_param_count(const ToyTransformerConfig& cfg, std::uint64_t attn_rows,
                                std::uint64_t kept_ffn, std::uint64_t kept_heads) {
    const std::uint64_t d = cfg.d_model;
    std::uint64_t per_layer = 4 * d;                    // two layer-norms
    per_layer += 3 * attn_rows * d + d * attn_rows;     // q,k,v + o
    per_layer += kept_heads;                            // gates
    per_layer += 2 * kept_ffn * d;                      // ffn
    std::uint64_t total = per_layer * static_cast<std::uint64_t>(cfg.n_layers);
    total += static_cast<std::uint64_t>(cfg.vocab_size) * d;
    total += static_cast<std::uint64_t>(cfg.seq_len) * d;
    total += static_cast<std::uint64_t>(cfg.n_classes) * d + cfg.n_classes;
    return total;
}

std::uint64_t classifier_params(const ToyTransformerConfig& cfg) {
    return static_cast<std::uint64_t>(cfg.n_classes) * cfg.d_model + cfg.n_classes;
}

} // namespace

BudgetReport plan_budget(const PipelineConfig& cfg) {
    cfg.validate();
    const PlannedDims dims = planned_dims(cfg);
    const std::uint64_t d = cfg.model.d_model;
    const auto s2_sites = cfg.adapter.s2_sites();

    BudgetReport report;
    std::uint64_t maskable_total = 0;
    for (int l = 0; l < cfg.model.n_layers; ++l) {
        for (const auto& tag : kProjectionTags) {
            const bool uv = has_tag(cfg.adapter.uv_projections, tag);
            const bool s2 = has_tag(s2_sites, tag);
            const std::uint64_t m = tag == "o" ? d : dims.attn_rows;
            const std::uint64_t n = tag == "o" ? dims.attn_rows : d;
            maskable_total += m * n;
            if (!uv && !s2) continue;
            SiteBudget site;
            site.name = "layers." + std::to_string(l) + ".attn." + tag;
            site.m = m;
            site.n = n;
            site.r = uv ? cfg.adapter.rank : 0;
            site.card = s2 ? cfg.adapter.n_keep : 0;
            site.masked_fraction =
                cfg.pruning.mode == PruneMode::Unstructured ? cfg.pruning.sparsity : 0.0;
            report.per_site.push_back(site);
        }
    }

    std::uint64_t extras = 0;
    if (cfg.budget.include_classifier) extras += classifier_params(cfg.model);
    if (cfg.pruning.mode == PruneMode::Structured) {
        extras += dims.kept_heads * static_cast<std::uint64_t>(cfg.model.n_layers);
    }
    report.trainable_params = count_trainable(report.per_site, extras);

    report.total_params = dense_param_count(cfg.model, dims.attn_rows, dims.kept_ffn,
                                            dims.kept_heads);
    for (const auto& site : report.per_site) {
        report.total_params += (site.m + site.n) * site.r + site.card;
    }

    if (cfg.pruning.mode == PruneMode::Unstructured) {
        const auto masked = static_cast<std::uint64_t>(
            std::floor(cfg.pruning.sparsity * static_cast<double>(maskable_total)));
        report.pretrained_sparsity =
            maskable_total == 0 ? 0.0
                                : static_cast<double>(masked) / static_cast<double>(maskable_total);
    } else {
        const std::uint64_t full_attn = static_cast<std::uint64_t>(cfg.model.n_heads) *
                                        (cfg.model.d_model / cfg.model.n_heads);
        const std::uint64_t dense_site_params =
            static_cast<std::uint64_t>(cfg.model.n_layers) *
            (4 * full_attn * d + 2 * static_cast<std::uint64_t>(cfg.model.d_ff) * d);
        const std::uint64_t kept_site_params =
            static_cast<std::uint64_t>(cfg.model.n_layers) *
            (4 * dims.attn_rows * d + 2 * dims.kept_ffn * d);
        report.pretrained_sparsity =
            1.0 - static_cast<double>(kept_site_params) / static_cast<double>(dense_site_params);
    }

    const int head_dim = cfg.model.d_model / cfg.model.n_heads;
    AdapterState adapters;
    AdapterState adapters_dense;
    for (const auto& site : report.per_site) {
        adapters.sites.push_back({site.m, site.n, site.r, site.card});
        adapters_dense.sites.push_back({d, d, site.r, site.card});
    }
    const ArchSpec arch = arch_of(cfg.model, head_dim);
    MaskState current = cfg.pruning.mode == PruneMode::Unstructured
                            ? MaskState::unstructured(cfg.pruning.sparsity)
                            : MaskState::structured(static_cast<int>(dims.kept_heads),
                                                    static_cast<int>(dims.kept_ffn));
    report.flops_dense = estimate_flops(arch, cfg.model.seq_len, cfg.optimizer.batch_size,
                                        cfg.task.eval_size, MaskState::dense(), adapters_dense);
    report.flops_current = estimate_flops(arch, cfg.model.seq_len, cfg.optimizer.batch_size,
                                          cfg.task.eval_size, current, adapters);
    report.flops_convention = flops_convention();
    return report;
}

BudgetReport snapshot_budget(const ToyTransformer& model, const PipelineConfig& cfg) {
    const auto s2_sites = cfg.adapter.s2_sites();
    const std::uint64_t d = cfg.model.d_model;

    BudgetReport report;
    std::uint64_t maskable_total = 0;
    std::uint64_t masked_total = 0;
    AdapterState adapters;
    AdapterState adapters_dense;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (const auto& tag : kProjectionTags) {
            const AdaptedLinear& lin = projection_of(model.layers[l], tag);
            maskable_total += lin.weight.size();
            if (lin.mask) {
                masked_total += lin.weight.size() - lin.mask->kept_count();
            }
            if (!lin.adapter) continue;
            const SparseLowRankUpdate& upd = *lin.adapter;
            SiteBudget site;
            site.name = "layers." + std::to_string(l) + ".attn." + tag;
            site.m = upd.host_rows;
            site.n = upd.host_cols;
            site.r = upd.rank();
            site.card = upd.support.card();
            site.masked_fraction = lin.mask ? lin.mask->sparsity() : 0.0;
            const std::uint64_t analytic = (site.m + site.n) * site.r + site.card;
            if (analytic != upd.trainable_count()) {
                throw PipelineError("budget cross-check failed at " + site.name + ": analytic " +
                                    std::to_string(analytic) + " vs stored " +
                                    std::to_string(upd.trainable_count()));
            }
            report.per_site.push_back(site);
            adapters.sites.push_back({site.m, site.n, site.r, site.card});
            const bool uv = has_tag(cfg.adapter.uv_projections, tag);
            const bool s2 = has_tag(s2_sites, tag);
            adapters_dense.sites.push_back(
                {d, d, uv ? cfg.adapter.rank : 0, s2 ? cfg.adapter.n_keep : 0});
        }
    }

    std::uint64_t extras = 0;
    if (cfg.budget.include_classifier) {
        extras += model.cls_weight.size() + model.cls_bias.size();
    }
    if (cfg.pruning.mode == PruneMode::Structured) {
        for (const auto& layer : model.layers) extras += layer.gates.size();
    }
    report.trainable_params = count_trainable(report.per_site, extras);

    const std::uint64_t attn_rows = model.layers.empty()
                                        ? 0
                                        : model.layers.front().wq.weight.rows();
    report.total_params = dense_param_count(model.cfg, attn_rows, model.cfg.d_ff,
                                            model.cfg.n_heads);
    for (const auto& site : report.per_site) {
        report.total_params += (site.m + site.n) * site.r + site.card;
    }

    if (cfg.pruning.mode == PruneMode::Unstructured) {
        report.pretrained_sparsity =
            maskable_total == 0
                ? 0.0
                : static_cast<double>(masked_total) / static_cast<double>(maskable_total);
    } else {
        const std::uint64_t full_attn = static_cast<std::uint64_t>(cfg.model.n_heads) *
                                        (cfg.model.d_model / cfg.model.n_heads);
        const std::uint64_t dense_site_params =
            static_cast<std::uint64_t>(cfg.model.n_layers) *
            (4 * full_attn * d + 2 * static_cast<std::uint64_t>(cfg.model.d_ff) * d);
        const std::uint64_t kept_site_params =
            static_cast<std::uint64_t>(model.cfg.n_layers) *
            (4 * attn_rows * d + 2 * static_cast<std::uint64_t>(model.cfg.d_ff) * d);
        report.pretrained_sparsity =
            1.0 - static_cast<double>(kept_site_params) / static_cast<double>(dense_site_params);
    }

    const ArchSpec arch = arch_of(cfg.model, model.head_dim);
    MaskState current = cfg.pruning.mode == PruneMode::Unstructured
                            ? MaskState::unstructured(report.pretrained_sparsity)
                            : MaskState::structured(model.cfg.n_heads, model.cfg.d_ff);
    report.flops_dense = estimate_flops(arch, cfg.model.seq_len, cfg.optimizer.batch_size,
                                        cfg.task.eval_size, MaskState::dense(), adapters_dense);
    report.flops_current = estimate_flops(arch, cfg.model.seq_len, cfg.optimizer.batch_size,
                                          cfg.task.eval_size, current, adapters);
    report.flops_convention = flops_convention();
    return report;
}

std::uint64_t pretrained_checksum(const ToyTransformer& model) {
    std::uint64_t hash = 0xCBF29CE484222325ULL;
    auto mix_floats = [&hash](std::span<const float> values) {
        for (float value : values) {
            std::uint32_t bits;
            static_assert(sizeof(bits) == sizeof(value));
            std::memcpy(&bits, &value, sizeof(bits));
            for (int shift = 0; shift < 32; shift += 8) {
                hash ^= (bits >> shift) & 0xFF;
                hash *= 0x100000001B3ULL;
            }
        }
    };
    auto mix_vec = [&](const std::vector<float>& values) {
        mix_floats(std::span<const float>(values.data(), values.size()));
    };
    mix_floats(model.tok_emb.data());
    mix_floats(model.pos_emb.data());
    for (const auto& layer : model.layers) {
        mix_vec(layer.ln1_gamma);
        mix_vec(layer.ln1_beta);
        mix_floats(layer.wq.weight.data());
        mix_floats(layer.wk.weight.data());
        mix_floats(layer.wv.weight.data());
        mix_floats(layer.wo.weight.data());
        mix_vec(layer.ln2_gamma);
        mix_vec(layer.ln2_beta);
        mix_floats(layer.ffn_w1.data());
        mix_floats(layer.ffn_w2.data());
    }
    return hash;
}

// ---- stages ------------------------------------------------------------------

PretrainResult pretrain_dense(const PipelineConfig& cfg) {
    cfg.validate();
    Rng base(cfg.seed);
    Rng init_rng = base.derive("pretrain_init");
    PretrainResult result{ToyTransformer::init(cfg.model, init_rng), {}};

    TaskSpec spec = cfg.task_spec();
    TaskData task = make_task(spec, cfg.task.pretrain_seed);

    TrainPlan plan;
    plan.dense = true;
    plan.classifier = true;

    double accuracy = 0.0;
    TrainOutcome outcome = train_stage(
        result.model, task.train, cfg.optimizer, plan, 0.0, cfg.optimizer.pretrain_epochs,
        base.derive("pretrain_order"), [&](int) {
            accuracy = evaluate(result.model, task.eval);
            return accuracy >= 0.95;
        });
    if (accuracy < 0.60) {
        throw PipelineError("pretraining stalled at eval accuracy " + std::to_string(accuracy) +
                            "; task and model config are mismatched");
    }
    result.report.stage = "pretrain";
    result.report.train_loss = std::move(outcome.losses);
    result.report.steps = outcome.steps;
    result.report.eval_accuracy = accuracy;
    result.report.budget = snapshot_budget(result.model, cfg);
    return result;
}

DseeResult run_dsee(const PipelineConfig& cfg, const ToyTransformer& pretrained) {
    cfg.validate();
    if (!(pretrained.cfg == cfg.model)) {
        throw PipelineError("pretrained checkpoint incompatible with the pipeline config");
    }
    for (const auto& layer : pretrained.layers) {
        for (const auto& tag : kProjectionTags) {
            const AdaptedLinear& lin = projection_of(layer, tag);
            if (lin.adapter || lin.mask) {
                throw PipelineError("run_dsee expects a dense checkpoint without adapters/masks");
            }
        }
    }

    DseeResult result{pretrained, {}};
    ToyTransformer& model = result.model;
    Rng base(cfg.seed);
    const auto s2_sites = cfg.adapter.s2_sites();

    // stage 0: embed supports and fresh updates
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (const auto& tag : kProjectionTags) {
            const bool uv = has_tag(cfg.adapter.uv_projections, tag);
            const bool s2 = has_tag(s2_sites, tag);
            if (!uv && !s2) continue;
            const std::string site = "layers." + std::to_string(l) + ".attn." + tag;
            AdaptedLinear& lin = projection_of(model.layers[l], tag);
            Rng site_rng = base.derive("adapter_init." + site);
            if (uv) {
                lin.adapter = init_update(lin.weight, cfg.adapter.rank,
                                          s2 ? cfg.adapter.n_keep : 0, cfg.adapter.method,
                                          cfg.adapter.solver, site_rng);
            } else {
                // sparse-only site: support still extracted at the configured
                // rank, but no low-rank factors are attached
                SparseLowRankUpdate upd;
                upd.host_rows = lin.weight.rows();
                upd.host_cols = lin.weight.cols();
                upd.support = select_support(lin.weight, cfg.adapter.method, cfg.adapter.n_keep,
                                             cfg.adapter.rank, cfg.adapter.solver, site_rng);
                upd.u = DenseMatrix(lin.weight.rows(), 0);
                upd.v = DenseMatrix(0, lin.weight.cols());
                upd.s2_values.assign(upd.support.card(), 0.0f);
                lin.adapter = std::move(upd);
            }
        }
    }

    TaskData task = make_task(cfg.task_spec(), cfg.task.finetune_seed);

    // stage I: train adapters (and gates when structured) on the frozen host
    {
        TrainPlan plan;
        plan.adapters = true;
        plan.classifier = true;
        plan.gates = cfg.pruning.mode == PruneMode::Structured;
        const double lambda = plan.gates ? cfg.pruning.lambda_l1 : 0.0;
        TrainOutcome outcome =
            train_stage(model, task.train, cfg.optimizer, plan, lambda,
                        cfg.optimizer.epochs_stage1, base.derive("stage1_order"));
        StageReport report;
        report.stage = "stage1";
        report.train_loss = std::move(outcome.losses);
        report.steps = outcome.steps;
        report.eval_accuracy = evaluate(model, task.eval);
        report.budget = snapshot_budget(model, cfg);
        result.reports.push_back(std::move(report));
    }

    // stage II: derive sparsity
    if (cfg.pruning.mode == PruneMode::Unstructured) {
        if (cfg.pruning.sparsity > 0.0) {
            std::vector<DenseMatrix> merged;
            std::vector<NamedMatrix> named;
            merged.reserve(model.layers.size() * kProjectionTags.size());
            for (std::size_t l = 0; l < model.layers.size(); ++l) {
                for (const auto& tag : kProjectionTags) {
                    const AdaptedLinear& lin = projection_of(model.layers[l], tag);
                    if (lin.adapter) {
                        SparseLowRankUpdate upd = *lin.adapter;
                        if (!cfg.pruning.mask_includes_s2) {
                            std::fill(upd.s2_values.begin(), upd.s2_values.end(), 0.0f);
                        }
                        merged.push_back(merge(lin.weight, std::nullopt, upd));
                    } else {
                        merged.push_back(lin.weight);
                    }
                    named.push_back({"layers." + std::to_string(l) + ".attn." + tag,
                                     &merged.back()});
                }
            }
            std::vector<UnstructuredMask> masks = magnitude_mask(named, cfg.pruning.sparsity);
            std::size_t idx = 0;
            for (std::size_t l = 0; l < model.layers.size(); ++l) {
                for (const auto& tag : kProjectionTags) {
                    projection_of(model.layers[l], tag).mask = std::move(masks[idx++]);
                }
            }
        }
    } else {
        result.kept_heads = kept_heads_after_prune(model, cfg.pruning.head_ratio);
        model = prune_heads(model, cfg.pruning.head_ratio);
        if (cfg.pruning.ffn_ratio > 0.0) {
            result.kept_ffn = kept_ffn_after_prune(model, cfg.pruning.ffn_ratio);
            model = prune_ffn(model, cfg.pruning.ffn_ratio);
        }
    }
    {
        StageReport report;
        report.stage = "stage2";
        report.steps = 0;
        report.eval_accuracy = evaluate(model, task.eval);
        report.budget = snapshot_budget(model, cfg);
        result.reports.push_back(std::move(report));
    }

    // stage III: recovery tuning with masks/pruned shapes fixed
    {
        TrainPlan plan;
        plan.adapters = true;
        plan.classifier = true;
        TrainOutcome outcome =
            train_stage(model, task.train, cfg.optimizer, plan, 0.0,
                        cfg.optimizer.epochs_stage3, base.derive("stage3_order"));
        StageReport report;
        report.stage = "stage3";
        report.train_loss = std::move(outcome.losses);
        report.steps = outcome.steps;
        report.eval_accuracy = evaluate(model, task.eval);
        report.budget = snapshot_budget(model, cfg);
        result.reports.push_back(std::move(report));
    }
    return result;
}

} // namespace dsee
