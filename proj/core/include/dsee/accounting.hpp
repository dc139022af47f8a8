#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsee/matrix.hpp"

namespace dsee {

/// One adapted weight-matrix site for budget arithmetic.
struct SiteBudget {
    std::string name;
    std::uint64_t m = 0;
    std::uint64_t n = 0;
    std::uint64_t r = 0;
    std::uint64_t card = 0;
    double masked_fraction = 0.0;
};

/// Parameter/sparsity/FLOPs accounting record emitted by the CLI.
struct BudgetReport {
    std::uint64_t trainable_params = 0;
    std::uint64_t total_params = 0;
    double pretrained_sparsity = 0.0;
    std::uint64_t flops_dense = 0;
    std::uint64_t flops_current = 0;
    std::string flops_convention;
    std::vector<SiteBudget> per_site;
};

/// Exact trainable-parameter sum: per site (m+n)*r + card, plus extras
/// (classifier, gates) when those are trainable.
std::uint64_t count_trainable(const std::vector<SiteBudget>& sites, std::uint64_t extras);

/// Loose budget bound on the useful rank: (m*n - card) / (m + n). Configured
/// ranks above this value cannot reduce trainable parameters.
double rank_budget_bound(std::uint64_t m, std::uint64_t n, std::uint64_t card);

/// Transformer-encoder shape for analytic FLOPs estimation. head_dim is fixed
/// at construction time (d_model / n_heads of the unpruned model) so that
/// pruned architectures keep their per-head width.
struct ArchSpec {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int head_dim = 0;
    int d_ff = 0;
    int n_classes = 0;
};

struct MaskState {
    enum class Kind { Dense, Unstructured, Structured };
    Kind kind = Kind::Dense;
    double sparsity = 0.0; // unstructured target; does not change FLOPs
    int kept_heads = 0;    // structured: surviving heads per layer
    int kept_ffn = 0;      // structured: surviving intermediate units

    static MaskState dense();
    static MaskState unstructured(double sparsity);
    static MaskState structured(int kept_heads, int kept_ffn);
};

/// Adapter contribution: each site adds ((m+n)*r + card) MACs per token. The
/// list covers the whole network (all layers), so shrunk or heterogeneous
/// sites count exactly.
struct AdapterFlopsSite {
    std::uint64_t m = 0;
    std::uint64_t n = 0;
    std::uint64_t r = 0;
    std::uint64_t card = 0;
};

struct AdapterState {
    std::vector<AdapterFlopsSite> sites;

    static AdapterState none() { return {}; }
};

/// Analytic FLOPs for evaluating `dataset_size` sequences in batches of
/// `batch` (the final batch is padded to full size, matching fixed-shape
/// execution). Convention: 2 FLOPs per multiply-accumulate, 1 per bias add,
/// softmax 5 ops/element, layer-norm 8 ops/element, activation 8 ops/element,
/// head gates 1 op/element; embedding lookups are free. Unstructured masks do
/// not reduce the count (irregular sparsity executes on dense kernels);
/// structured pruning shrinks the projection and FFN dimensions.
std::uint64_t estimate_flops(const ArchSpec& arch, int seq_len, int batch,
                             std::uint64_t dataset_size, const MaskState& mask_state,
                             const AdapterState& adapter_state);

/// Human-readable description of the counting convention above.
std::string flops_convention();

struct Histogram {
    std::vector<double> edges;        // bins + 1 entries
    std::vector<std::uint64_t> counts; // bins entries
};

/// Histogram of (w_after - w_before); deltas outside [lo, hi) clamp into the
/// edge bins, so counts always sum to rows*cols.
Histogram delta_histogram(const DenseMatrix& w_before, const DenseMatrix& w_after,
                          std::size_t bins, double lo, double hi);

} // namespace dsee
