#include "dsee/reports.hpp"

#include <sstream>

#include <json.hpp>

namespace dsee {

namespace {

using nlohmann::json;

json budget_to_json(const BudgetReport& report) {
    json sites = json::array();
    for (const auto& site : report.per_site) {
        sites.push_back({{"name", site.name},
                         {"m", site.m},
                         {"n", site.n},
                         {"r", site.r},
                         {"card", site.card},
                         {"masked_fraction", site.masked_fraction}});
    }
    return json{{"trainable_params", report.trainable_params},
                {"total_params", report.total_params},
                {"pretrained_sparsity", report.pretrained_sparsity},
                {"flops_dense", report.flops_dense},
                {"flops_current", report.flops_current},
                {"flops_convention", report.flops_convention},
                {"per_site", std::move(sites)}};
}

} // namespace

std::string budget_report_json(const BudgetReport& report) {
    return budget_to_json(report).dump(2) + "\n";
}

std::string stage_reports_json(const std::vector<StageReport>& reports) {
    json stages = json::array();
    for (const auto& report : reports) {
        stages.push_back({{"stage", report.stage},
                          {"steps", report.steps},
                          {"eval_accuracy", report.eval_accuracy},
                          {"train_loss", report.train_loss},
                          {"budget", budget_to_json(report.budget)}});
    }
    return json{{"stages", std::move(stages)}}.dump(2) + "\n";
}

std::string histogram_json(const Histogram& hist, const std::vector<std::string>& tensors) {
    std::uint64_t total = 0;
    for (std::uint64_t c : hist.counts) total += c;
    return json{{"bins", hist.counts.size()},
                {"lo", hist.edges.front()},
                {"hi", hist.edges.back()},
                {"edges", hist.edges},
                {"counts", hist.counts},
                {"total", total},
                {"tensors", tensors}}
               .dump(2) +
           "\n";
}

BudgetSummary parse_budget_summary(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ParameterError(std::string("budget report: unparseable JSON: ") + e.what());
    }
    BudgetSummary summary;
    try {
        summary.trainable_params = root.at("trainable_params").get<std::uint64_t>();
        summary.total_params = root.at("total_params").get<std::uint64_t>();
        summary.pretrained_sparsity = root.at("pretrained_sparsity").get<double>();
        summary.flops_dense = root.at("flops_dense").get<std::uint64_t>();
        summary.flops_current = root.at("flops_current").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ParameterError(std::string("budget report: missing field: ") + e.what());
    }
    return summary;
}

std::string histogram_gnuplot(const Histogram& hist) {
    std::ostringstream out;
    out.precision(17);
    for (std::size_t i = 0; i < hist.counts.size(); ++i) {
        const double center = 0.5 * (hist.edges[i] + hist.edges[i + 1]);
        out << center << ' ' << hist.counts[i] << '\n';
    }
    return out.str();
}

} // namespace dsee
