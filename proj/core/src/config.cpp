#include "dsee/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include <json.hpp>

namespace dsee {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> known,
                         const char* section) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        bool found = false;
        for (const char* k : known) {
            if (key == k) {
                found = true;
                break;
            }
        }
        if (!found) {
            throw ParameterError(std::string("config: unknown key '") + key + "' in " + section);
        }
    }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ParameterError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    }
}

} // namespace

PipelineConfig config_from_json_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ParameterError(std::string("config: unparseable JSON: ") + e.what());
    }
    reject_unknown_keys(root, {"model", "adapter", "pruning", "optimizer", "task", "budget",
                               "seed"},
                        "top level");

    PipelineConfig cfg;
    if (root.contains("model")) {
        const json& m = root.at("model");
        reject_unknown_keys(m, {"vocab_size", "seq_len", "d_model", "n_heads", "d_ff",
                                "n_layers", "n_classes"},
                            "model");
        read_field(m, "vocab_size", cfg.model.vocab_size);
        read_field(m, "seq_len", cfg.model.seq_len);
        read_field(m, "d_model", cfg.model.d_model);
        read_field(m, "n_heads", cfg.model.n_heads);
        read_field(m, "d_ff", cfg.model.d_ff);
        read_field(m, "n_layers", cfg.model.n_layers);
        read_field(m, "n_classes", cfg.model.n_classes);
    }
    if (root.contains("adapter")) {
        const json& a = root.at("adapter");
        reject_unknown_keys(a, {"rank", "n_keep", "method", "uv_projections", "s2_projections",
                                "solver"},
                            "adapter");
        read_field(a, "rank", cfg.adapter.rank);
        read_field(a, "n_keep", cfg.adapter.n_keep);
        if (a.contains("method")) {
            cfg.adapter.method = parse_support_method(a.at("method").get<std::string>());
        }
        read_field(a, "uv_projections", cfg.adapter.uv_projections);
        read_field(a, "s2_projections", cfg.adapter.s2_projections);
        if (a.contains("solver")) {
            const json& s = a.at("solver");
            reject_unknown_keys(s, {"tol", "max_iter", "power_iters"}, "adapter.solver");
            read_field(s, "tol", cfg.adapter.solver.tol);
            read_field(s, "max_iter", cfg.adapter.solver.max_iter);
            read_field(s, "power_iters", cfg.adapter.solver.power_iters);
        }
    }
    if (root.contains("pruning")) {
        const json& p = root.at("pruning");
        reject_unknown_keys(p, {"mode", "sparsity", "head_ratio", "ffn_ratio", "lambda_l1",
                                "mask_includes_s2"},
                            "pruning");
        if (p.contains("mode")) {
            cfg.pruning.mode = parse_prune_mode(p.at("mode").get<std::string>());
        }
        read_field(p, "sparsity", cfg.pruning.sparsity);
        read_field(p, "head_ratio", cfg.pruning.head_ratio);
        read_field(p, "ffn_ratio", cfg.pruning.ffn_ratio);
        read_field(p, "lambda_l1", cfg.pruning.lambda_l1);
        read_field(p, "mask_includes_s2", cfg.pruning.mask_includes_s2);
    }
    if (root.contains("optimizer")) {
        const json& o = root.at("optimizer");
        reject_unknown_keys(o, {"learning_rate", "beta1", "beta2", "eps", "weight_decay",
                                "linear_decay", "batch_size", "pretrain_epochs", "epochs_stage1",
                                "epochs_stage2", "epochs_stage3"},
                            "optimizer");
        read_field(o, "learning_rate", cfg.optimizer.learning_rate);
        read_field(o, "beta1", cfg.optimizer.beta1);
        read_field(o, "beta2", cfg.optimizer.beta2);
        read_field(o, "eps", cfg.optimizer.eps);
        read_field(o, "weight_decay", cfg.optimizer.weight_decay);
        read_field(o, "linear_decay", cfg.optimizer.linear_decay);
        read_field(o, "batch_size", cfg.optimizer.batch_size);
        read_field(o, "pretrain_epochs", cfg.optimizer.pretrain_epochs);
        read_field(o, "epochs_stage1", cfg.optimizer.epochs_stage1);
        read_field(o, "epochs_stage2", cfg.optimizer.epochs_stage2);
        read_field(o, "epochs_stage3", cfg.optimizer.epochs_stage3);
    }
    if (root.contains("task")) {
        const json& t = root.at("task");
        reject_unknown_keys(t, {"kind", "train_size", "eval_size", "key_position",
                                "pretrain_seed", "finetune_seed"},
                            "task");
        if (t.contains("kind")) {
            cfg.task.kind = parse_task_kind(t.at("kind").get<std::string>());
        }
        read_field(t, "train_size", cfg.task.train_size);
        read_field(t, "eval_size", cfg.task.eval_size);
        read_field(t, "key_position", cfg.task.key_position);
        read_field(t, "pretrain_seed", cfg.task.pretrain_seed);
        read_field(t, "finetune_seed", cfg.task.finetune_seed);
    }
    if (root.contains("budget")) {
        const json& b = root.at("budget");
        reject_unknown_keys(b, {"include_classifier"}, "budget");
        read_field(b, "include_classifier", cfg.budget.include_classifier);
    }
    read_field(root, "seed", cfg.seed);
    return cfg;
}

std::string config_to_json_text(const PipelineConfig& cfg) {
    json root;
    root["model"] = {{"vocab_size", cfg.model.vocab_size}, {"seq_len", cfg.model.seq_len},
                     {"d_model", cfg.model.d_model},       {"n_heads", cfg.model.n_heads},
                     {"d_ff", cfg.model.d_ff},             {"n_layers", cfg.model.n_layers},
                     {"n_classes", cfg.model.n_classes}};
    root["adapter"] = {{"rank", cfg.adapter.rank},
                       {"n_keep", cfg.adapter.n_keep},
                       {"method", support_method_name(cfg.adapter.method)},
                       {"uv_projections", cfg.adapter.uv_projections},
                       {"s2_projections", cfg.adapter.s2_sites()},
                       {"solver",
                        {{"tol", cfg.adapter.solver.tol},
                         {"max_iter", cfg.adapter.solver.max_iter},
                         {"power_iters", cfg.adapter.solver.power_iters}}}};
    root["pruning"] = {{"mode", prune_mode_name(cfg.pruning.mode)},
                       {"sparsity", cfg.pruning.sparsity},
                       {"head_ratio", cfg.pruning.head_ratio},
                       {"ffn_ratio", cfg.pruning.ffn_ratio},
                       {"lambda_l1", cfg.pruning.lambda_l1},
                       {"mask_includes_s2", cfg.pruning.mask_includes_s2}};
    root["optimizer"] = {{"learning_rate", cfg.optimizer.learning_rate},
                         {"beta1", cfg.optimizer.beta1},
                         {"beta2", cfg.optimizer.beta2},
                         {"eps", cfg.optimizer.eps},
                         {"weight_decay", cfg.optimizer.weight_decay},
                         {"linear_decay", cfg.optimizer.linear_decay},
                         {"batch_size", cfg.optimizer.batch_size},
                         {"pretrain_epochs", cfg.optimizer.pretrain_epochs},
                         {"epochs_stage1", cfg.optimizer.epochs_stage1},
                         {"epochs_stage2", cfg.optimizer.epochs_stage2},
                         {"epochs_stage3", cfg.optimizer.epochs_stage3}};
    root["task"] = {{"kind", task_kind_name(cfg.task.kind)},
                    {"train_size", cfg.task.train_size},
                    {"eval_size", cfg.task.eval_size},
                    {"key_position", cfg.task.key_position},
                    {"pretrain_seed", cfg.task.pretrain_seed},
                    {"finetune_seed", cfg.task.finetune_seed}};
    root["budget"] = {{"include_classifier", cfg.budget.include_classifier}};
    root["seed"] = cfg.seed;
    return root.dump(2) + "\n";
}

PipelineConfig load_config(const std::string& path) {
    PipelineConfig cfg = config_from_json_text(read_text_file(path));
    if (const char* env_seed = std::getenv("DSEE_SEED")) {
        char* end = nullptr;
        const unsigned long long value = std::strtoull(env_seed, &end, 10);
        if (end == env_seed || *end != '\0') {
            throw ParameterError("DSEE_SEED is not an unsigned integer");
        }
        cfg.seed = value;
    }
    return cfg;
}

std::string read_text_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) {
        throw IoError("cannot open '" + path + "'");
    }
    std::string text;
    char chunk[65536];
    std::size_t n;
    while ((n = std::fread(chunk, 1, sizeof(chunk), f)) > 0) {
        text.append(chunk, n);
    }
    const bool bad = std::ferror(f) != 0;
    std::fclose(f);
    if (bad) {
        throw IoError("read failure on '" + path + "'");
    }
    return text;
}

void write_text_file(const std::string& path, const std::string& text) {
    const std::string tmp_path = path + ".tmp";
    std::FILE* f = std::fopen(tmp_path.c_str(), "wb");
    if (!f) {
        throw IoError("cannot open '" + tmp_path + "' for writing");
    }
    const std::size_t written = std::fwrite(text.data(), 1, text.size(), f);
    const bool ok = std::fclose(f) == 0 && written == text.size();
    if (!ok) {
        std::remove(tmp_path.c_str());
        throw IoError("short write to '" + tmp_path + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp_path, path, ec);
    if (ec) {
        std::remove(tmp_path.c_str());
        throw IoError("cannot rename '" + tmp_path + "': " + ec.message());
    }
}

} // namespace dsee
