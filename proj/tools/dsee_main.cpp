#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsee/accounting.hpp"
#include "dsee/adapter.hpp"
#include "dsee/archive.hpp"
#include "dsee/config.hpp"
#include "dsee/pipeline.hpp"
#include "dsee/reports.hpp"
#include "dsee/serialize.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitPipeline = 3;

struct DecomposeArgs {
    std::string input, out, method = "decompose";
    std::size_t rank = 4;
    std::size_t card = 64;
    std::uint64_t seed = 42;
};

int cmd_decompose(const DecomposeArgs& args) {
    const dsee::TensorArchive input = dsee::read_archive(args.input);
    const dsee::SupportMethod method = dsee::parse_support_method(args.method);
    dsee::Rng base(args.seed);

    dsee::TensorArchive out;
    out.meta()["source"] = args.input;
    out.meta()["method"] = args.method;
    out.meta()["rank"] = std::to_string(args.rank);
    out.meta()["card"] = std::to_string(args.card);
    out.meta()["seed"] = std::to_string(args.seed);

    std::size_t matched = 0;
    for (const auto& [name, rec] : input.tensors()) {
        if (rec.dtype != dsee::Dtype::F32 || rec.shape.size() != 2) continue;
        const std::size_t m = rec.shape[0], n = rec.shape[1];
        if (std::min(m, n) < std::max<std::size_t>(args.rank, 1) || args.card > m * n) {
            std::cerr << "decompose: skipping '" << name << "' (" << m << "x" << n
                      << " too small for rank " << args.rank << " / card " << args.card
                      << ")\n";
            continue;
        }
        dsee::DenseMatrix w(m, n, input.get_f32(name));
        dsee::Rng rng = base.derive(name);
        dsee::SparseLowRankUpdate upd =
            dsee::init_update(w, args.rank, args.card, method, rng);

        std::vector<float> u_vals(upd.u.data().begin(), upd.u.data().end());
        std::vector<float> v_vals(upd.v.data().begin(), upd.v.data().end());
        out.put_f32(name + ".u", {upd.u.rows(), upd.u.cols()}, u_vals);
        out.put_f32(name + ".v", {upd.v.rows(), upd.v.cols()}, v_vals);
        std::vector<std::int64_t> flat;
        flat.reserve(upd.support.card() * 2);
        for (const auto& [i, j] : upd.support.indices) {
            flat.push_back(i);
            flat.push_back(j);
        }
        out.put_i64(name + ".support", {upd.support.card(), 2}, flat);
        out.put_f32(name + ".s2", {upd.s2_values.size()}, upd.s2_values);
        ++matched;
    }
    if (matched == 0) {
        std::cerr << "decompose: no 2-D f32 tensors matched in '" << args.input << "'\n";
    }
    dsee::write_archive(args.out, out);
    std::cout << "decomposed " << matched << " tensor(s) -> " << args.out << "\n";
    return kExitOk;
}

int cmd_plan(const std::string& config_path, const std::string& out_path) {
    const dsee::PipelineConfig cfg = dsee::load_config(config_path);
    const dsee::BudgetReport report = dsee::plan_budget(cfg);
    dsee::write_text_file(out_path, dsee::budget_report_json(report));
    std::cout << "trainable_params " << report.trainable_params << "\n";
    return kExitOk;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_path) {
    const dsee::PipelineConfig cfg = dsee::load_config(config_path);
    dsee::PretrainResult result = dsee::pretrain_dense(cfg);
    dsee::write_archive(out_path, dsee::model_to_archive(result.model));
    std::cout << "pretrained to eval accuracy " << result.report.eval_accuracy << " in "
              << result.report.steps << " steps -> " << out_path << "\n";
    return kExitOk;
}

int cmd_dsee(const std::string& config_path, const std::string& pretrained_path,
             const std::string& out_dir) {
    const dsee::PipelineConfig cfg = dsee::load_config(config_path);
    const dsee::ToyTransformer pretrained =
        dsee::model_from_archive(dsee::read_archive(pretrained_path));

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw dsee::IoError("cannot create output directory '" + out_dir + "': " + ec.message());
    }

    dsee::DseeResult result = dsee::run_dsee(cfg, pretrained);
    const auto path = [&](const char* name) {
        return (std::filesystem::path(out_dir) / name).string();
    };

    dsee::write_text_file(path("config.json"), dsee::config_to_json_text(cfg));
    dsee::write_text_file(path("stage_reports.json"), dsee::stage_reports_json(result.reports));
    dsee::write_text_file(path("budget.json"),
                          dsee::budget_report_json(result.reports.back().budget));
    dsee::write_archive(path("model_final.dsee"), dsee::model_to_archive(result.model));
    dsee::write_archive(path("model_merged.dsee"), dsee::merged_model_archive(result.model));

    dsee::TensorArchive masks;
    masks.meta()["mode"] = dsee::prune_mode_name(cfg.pruning.mode);
    if (cfg.pruning.mode == dsee::PruneMode::Unstructured) {
        for (std::size_t l = 0; l < result.model.layers.size(); ++l) {
            const auto& layer = result.model.layers[l];
            const std::pair<const char*, const dsee::AdaptedLinear*> projs[] = {
                {"q", &layer.wq}, {"k", &layer.wk}, {"v", &layer.wv}, {"o", &layer.wo}};
            for (const auto& [tag, lin] : projs) {
                if (!lin->mask) continue;
                masks.put_u8("layers." + std::to_string(l) + ".attn." + tag + ".mask",
                             {lin->mask->rows, lin->mask->cols}, lin->mask->bits);
            }
        }
    } else {
        for (std::size_t l = 0; l < result.kept_heads.size(); ++l) {
            std::vector<std::int64_t> kept(result.kept_heads[l].begin(),
                                           result.kept_heads[l].end());
            masks.put_i64("layers." + std::to_string(l) + ".kept_heads", {kept.size()}, kept);
        }
        for (std::size_t l = 0; l < result.kept_ffn.size(); ++l) {
            std::vector<std::int64_t> kept(result.kept_ffn[l].begin(),
                                           result.kept_ffn[l].end());
            masks.put_i64("layers." + std::to_string(l) + ".kept_ffn", {kept.size()}, kept);
        }
    }
    dsee::write_archive(path("masks.dsee"), masks);

    std::cout << "stage accuracies:";
    for (const auto& report : result.reports) {
        std::cout << ' ' << report.stage << '=' << report.eval_accuracy;
    }
    std::cout << "\noutputs in " << out_dir << "\n";
    return kExitOk;
}

struct ReportArgs {
    std::string before, after, out, gnuplot;
    std::size_t bins = 64;
    double lo = 0.0, hi = 0.0;
    bool has_range = false;
};

int cmd_report(const ReportArgs& args) {
    const dsee::TensorArchive before = dsee::read_archive(args.before);
    const dsee::TensorArchive after = dsee::read_archive(args.after);

    std::vector<std::string> common;
    for (const auto& [name, rec] : before.tensors()) {
        if (rec.dtype != dsee::Dtype::F32 || rec.shape.size() != 2) continue;
        if (!after.contains(name)) continue;
        const dsee::TensorRecord& other = after.get(name);
        if (other.dtype != dsee::Dtype::F32 || other.shape != rec.shape) continue;
        common.push_back(name);
    }
    if (common.empty()) {
        throw dsee::InputError("no matching 2-D f32 tensors between the two archives");
    }

    double lo = args.lo, hi = args.hi;
    if (!args.has_range) {
        lo = 1e300;
        hi = -1e300;
        for (const auto& name : common) {
            const auto b = before.get_f32(name);
            const auto a = after.get_f32(name);
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double delta = static_cast<double>(a[i]) - b[i];
                lo = std::min(lo, delta);
                hi = std::max(hi, delta);
            }
        }
        if (!(lo < hi)) {
            const double pad = std::max(1e-6, std::abs(lo));
            hi = lo + pad;
            lo = lo - pad;
        }
    }

    dsee::Histogram total;
    for (const auto& name : common) {
        const dsee::TensorRecord& rec = before.get(name);
        dsee::DenseMatrix b(rec.shape[0], rec.shape[1], before.get_f32(name));
        dsee::DenseMatrix a(rec.shape[0], rec.shape[1], after.get_f32(name));
        dsee::Histogram h = dsee::delta_histogram(b, a, args.bins, lo, hi);
        if (total.counts.empty()) {
            total = std::move(h);
        } else {
            for (std::size_t i = 0; i < total.counts.size(); ++i) {
                total.counts[i] += h.counts[i];
            }
        }
    }
    dsee::write_text_file(args.out, dsee::histogram_json(total, common));
    if (!args.gnuplot.empty()) {
        dsee::write_text_file(args.gnuplot, dsee::histogram_gnuplot(total));
    }
    std::cout << "histogram over " << common.size() << " tensor(s) -> " << args.out << "\n";
    return kExitOk;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"dually sparsity-embedded efficient tuning toolkit"};
    app.require_subcommand(1);

    DecomposeArgs dec;
    CLI::App* decompose = app.add_subcommand(
        "decompose", "sparse-plus-low-rank support extraction for every 2-D f32 tensor");
    decompose->add_option("--input", dec.input, "input tensor archive")->required();
    decompose->add_option("--rank", dec.rank, "low-rank dimension r");
    decompose->add_option("--card", dec.card, "sparse support size N");
    decompose->add_option("--method", dec.method, "support selection method")
        ->check(CLI::IsMember({"decompose", "magnitude", "random"}));
    decompose->add_option("--seed", dec.seed, "base seed; per-tensor streams derive from it");
    decompose->add_option("--out", dec.out, "output archive")->required();

    std::string plan_config, plan_out;
    CLI::App* plan = app.add_subcommand("plan", "emit the budget report without training");
    plan->add_option("--config", plan_config, "pipeline config JSON")->required();
    plan->add_option("--out", plan_out, "output report path")->required();

    std::string pre_config, pre_out;
    CLI::App* pretrain = app.add_subcommand("pretrain", "train the dense host on the source task");
    pretrain->add_option("--config", pre_config, "pipeline config JSON")->required();
    pretrain->add_option("--out", pre_out, "output checkpoint archive")->required();

    std::string run_config, run_pretrained, run_out_dir;
    CLI::App* run = app.add_subcommand("dsee", "run the three-stage procedure end to end");
    run->add_option("--config", run_config, "pipeline config JSON")->required();
    run->add_option("--pretrained", run_pretrained, "pretrained checkpoint archive")->required();
    run->add_option("--out-dir", run_out_dir, "output directory")->required();

    ReportArgs rep;
    CLI::App* report = app.add_subcommand("report", "weight-change histogram between checkpoints");
    report->add_option("--before", rep.before, "archive before tuning")->required();
    report->add_option("--after", rep.after, "archive after tuning")->required();
    report->add_option("--bins", rep.bins, "histogram bins");
    CLI::Option* lo_opt = report->add_option("--lo", rep.lo, "histogram lower edge");
    CLI::Option* hi_opt = report->add_option("--hi", rep.hi, "histogram upper edge");
    report->add_option("--out", rep.out, "output JSON path")->required();
    report->add_option("--gnuplot", rep.gnuplot, "also write two-column gnuplot data");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        if (decompose->parsed()) return cmd_decompose(dec);
        if (plan->parsed()) return cmd_plan(plan_config, plan_out);
        if (pretrain->parsed()) return cmd_pretrain(pre_config, pre_out);
        if (run->parsed()) return cmd_dsee(run_config, run_pretrained, run_out_dir);
        if (report->parsed()) {
            rep.has_range = lo_opt->count() > 0 && hi_opt->count() > 0;
            if (rep.has_range && !(rep.lo < rep.hi)) {
                std::cerr << "report: --lo must be below --hi\n";
                return kExitUsage;
            }
            return cmd_report(rep);
        }
        std::cerr << app.help();
        return kExitUsage;
    } catch (const dsee::PipelineError& e) {
        std::cerr << "pipeline error: " << e.what() << "\n";
        return kExitPipeline;
    } catch (const dsee::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitPipeline;
    } catch (const dsee::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kExitPipeline;
    }
}

} // namespace

int main(int argc, char** argv) { return dispatch(argc, argv); }
