#include "dsee/accounting.hpp"

#include <cmath>

namespace dsee {

std::uint64_t count_trainable(const std::vector<SiteBudget>& sites, std::uint64_t extras) {
    std::uint64_t total = extras;
    for (const auto& site : sites) {
        total += (site.m + site.n) * site.r + site.card;
    }
    return total;
}

double rank_budget_bound(std::uint64_t m, std::uint64_t n, std::uint64_t card) {
    if (m + n == 0) return 0.0;
    const double numerator = static_cast<double>(m) * static_cast<double>(n) -
                             static_cast<double>(card);
    return std::max(0.0, numerator / static_cast<double>(m + n));
}

MaskState MaskState::dense() { return {}; }

MaskState MaskState::unstructured(double sparsity) {
    MaskState s;
    s.kind = Kind::Unstructured;
    s.sparsity = sparsity;
    return s;
}

MaskState MaskState::structured(int kept_heads, int kept_ffn) {
    MaskState s;
    s.kind = Kind::Structured;
    s.kept_heads = kept_heads;
    s.kept_ffn = kept_ffn;
    return s;
}

std::string flops_convention() {
    return "2 flops per multiply-accumulate; 1 per bias add; softmax 5 ops/element; "
           "layer-norm 8 ops/element; activation 8 ops/element; head gate 1 op/element; "
           "embedding lookups free; final batch padded to full size; unstructured masks "
           "counted at dense cost";
}

std::uint64_t estimate_flops(const ArchSpec& arch, int seq_len, int batch,
                             std::uint64_t dataset_size, const MaskState& mask_state,
                             const AdapterState& adapter_state) {
    if (arch.n_layers <= 0 || arch.d_model <= 0 || arch.n_heads <= 0 || arch.head_dim <= 0 ||
        arch.d_ff <= 0 || seq_len <= 0 || batch <= 0) {
        throw ParameterError("estimate_flops: architecture dimensions must be positive");
    }

    std::uint64_t kept_heads = arch.n_heads;
    std::uint64_t kept_ffn = arch.d_ff;
    if (mask_state.kind == MaskState::Kind::Structured) {
        if (mask_state.kept_heads <= 0 || mask_state.kept_heads > arch.n_heads ||
            mask_state.kept_ffn <= 0 || mask_state.kept_ffn > arch.d_ff) {
            throw ParameterError("estimate_flops: structured kept counts out of range");
        }
        kept_heads = mask_state.kept_heads;
        kept_ffn = mask_state.kept_ffn;
    }

    const std::uint64_t t = seq_len;
    const std::uint64_t d = arch.d_model;
    const std::uint64_t a = kept_heads * arch.head_dim; // attention width

    std::uint64_t per_layer = 0;
    per_layer += 2 * (3 * t * a * d) + 3 * t * a;   // q,k,v projections + biases
    per_layer += 2 * (t * t * a);                   // attention scores
    per_layer += 5 * (kept_heads * t * t);          // softmax
    per_layer += 2 * (t * t * a);                   // context aggregation
    per_layer += 1 * (t * a);                       // head gates
    per_layer += 2 * (t * d * a) + t * d;           // output projection + bias
    per_layer += 2 * (8 * t * d);                   // two layer-norms
    per_layer += 2 * (2 * t * d * kept_ffn) + t * (kept_ffn + d); // ffn + biases
    per_layer += 8 * (t * kept_ffn);                // activation

    std::uint64_t per_sequence = per_layer * static_cast<std::uint64_t>(arch.n_layers);
    for (const auto& site : adapter_state.sites) {
        per_sequence += 2 * (t * ((site.m + site.n) * site.r + site.card));
    }
    per_sequence += t * d;                              // mean pooling
    per_sequence += 2 * (static_cast<std::uint64_t>(arch.n_classes) * d) + arch.n_classes;

    const std::uint64_t batches = (dataset_size + batch - 1) / batch;
    return per_sequence * batches * static_cast<std::uint64_t>(batch);
}

Histogram delta_histogram(const DenseMatrix& w_before, const DenseMatrix& w_after,
                          std::size_t bins, double lo, double hi) {
    if (!w_before.same_shape(w_after)) {
        throw ShapeError("delta_histogram: " + w_before.shape_str() + " vs " +
                         w_after.shape_str());
    }
    if (bins == 0) {
        throw ParameterError("delta_histogram: bins must be positive");
    }
    if (!(lo < hi)) {
        throw ParameterError("delta_histogram: need lo < hi");
    }
    Histogram hist;
    hist.edges.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) {
        hist.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
    }
    hist.counts.assign(bins, 0);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < w_before.size(); ++i) {
        const double delta = static_cast<double>(w_after.data()[i]) - w_before.data()[i];
        auto bin = static_cast<std::int64_t>(std::floor((delta - lo) / width));
        if (bin < 0) bin = 0;
        if (bin >= static_cast<std::int64_t>(bins)) bin = static_cast<std::int64_t>(bins) - 1;
        ++hist.counts[static_cast<std::size_t>(bin)];
    }
    return hist;
}

} // namespace dsee
