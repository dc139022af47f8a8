#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsee/adapter.hpp"
#include "dsee/model.hpp"

namespace dsee {

struct NamedMatrix {
    std::string name;
    const DenseMatrix* matrix;
};

/// One-shot global magnitude masks: a single threshold across every listed
/// matrix, exactly floor(sparsity * total) entries masked. Ties at the
/// threshold are pruned in lexicographic (matrix, row, col) order, smaller
/// first, where "matrix" is the position in the input list.
/// Throws ParameterError when sparsity is outside [0, 1).
std::vector<UnstructuredMask> magnitude_mask(const std::vector<NamedMatrix>& matrices,
                                             double sparsity);

/// Per-layer head ranking by ascending |gate|; ties rank the lower head index
/// as less important. ranking[0] is the first head to prune.
std::vector<std::vector<std::size_t>> head_importance(
    const std::vector<std::vector<float>>& gates_per_layer);

/// Slices an update to surviving host rows/columns: u keeps kept_rows, v keeps
/// kept_cols, support entries outside the kept grid are dropped and indices
/// re-based. Rank is unchanged. Kept index sets must be sorted, in bounds and
/// non-empty.
SparseLowRankUpdate shrink_update(const SparseLowRankUpdate& upd,
                                  const std::vector<std::size_t>& kept_rows,
                                  const std::vector<std::size_t>& kept_cols);

/// Sorted per-layer head index sets that survive prune_heads at this ratio.
std::vector<std::vector<std::size_t>> kept_heads_after_prune(const ToyTransformer& model,
                                                             double ratio);

/// Sorted per-layer intermediate-unit index sets that survive prune_ffn;
/// units ranked by the l2 norm of their weights (w1 row and w2 column
/// jointly), ties keeping the lower unit index less important.
std::vector<std::vector<std::size_t>> kept_ffn_after_prune(const ToyTransformer& model,
                                                           double ratio);

/// Removes the floor(n_heads * ratio) least-important heads in every layer
/// (per head_importance of the current gates), physically deleting the head
/// slices of q/k/v rows and o columns, the gate entries, and shrinking any
/// attached adapters and masks. The pruned model's forward equals the original
/// with those gates forced to zero.
/// Throws ParameterError if no head would survive.
ToyTransformer prune_heads(const ToyTransformer& model, double ratio);

/// Same kept-index mechanism applied to the feed-forward intermediate units.
ToyTransformer prune_ffn(const ToyTransformer& model, double ratio);

} // namespace dsee
