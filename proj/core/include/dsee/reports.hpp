#pragma once

#include <string>
#include <vector>

#include "dsee/accounting.hpp"
#include "dsee/pipeline.hpp"

namespace dsee {

/// JSON renderings of the report records (schemas in docs/schemas/). Numbers
/// are emitted with shortest round-trip precision.
std::string budget_report_json(const BudgetReport& report);
std::string stage_reports_json(const std::vector<StageReport>& reports);
std::string histogram_json(const Histogram& hist, const std::vector<std::string>& tensors);

/// Parsed-back essentials of a budget report, for cross-checking emitted
/// reports without re-running a pipeline.
struct BudgetSummary {
    std::uint64_t trainable_params = 0;
    std::uint64_t total_params = 0;
    double pretrained_sparsity = 0.0;
    std::uint64_t flops_dense = 0;
    std::uint64_t flops_current = 0;
};

BudgetSummary parse_budget_summary(const std::string& json_text);

/// Two-column "bin_center count" rendering for gnuplot-style consumers.
std::string histogram_gnuplot(const Histogram& hist);

} // namespace dsee
