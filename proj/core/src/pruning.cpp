#include "dsee/pruning.hpp"

#include <algorithm>
#include <cmath>

namespace dsee {

std::vector<UnstructuredMask> magnitude_mask(const std::vector<NamedMatrix>& matrices,
                                             double sparsity) {
    if (!(sparsity >= 0.0 && sparsity < 1.0)) {
        throw ParameterError("magnitude_mask: sparsity must lie in [0, 1)");
    }
    struct Entry {
        float magnitude;
        std::uint32_t matrix;
        std::uint32_t row;
        std::uint32_t col;
    };
    std::vector<Entry> entries;
    std::size_t total = 0;
    for (const auto& nm : matrices) total += nm.matrix->size();
    entries.reserve(total);
    for (std::size_t mi = 0; mi < matrices.size(); ++mi) {
        const DenseMatrix& m = *matrices[mi].matrix;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) {
                entries.push_back({std::abs(m(i, j)), static_cast<std::uint32_t>(mi),
                                   static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
            }
        }
    }
    const std::size_t n_prune = static_cast<std::size_t>(
        std::floor(sparsity * static_cast<double>(total)));
    // ascending magnitude; ties pruned in (matrix, row, col) order
    auto weaker = [](const Entry& a, const Entry& b) {
        if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
        if (a.matrix != b.matrix) return a.matrix < b.matrix;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    };
    if (n_prune < entries.size()) {
        std::nth_element(entries.begin(), entries.begin() + n_prune, entries.end(), weaker);
    }

    std::vector<UnstructuredMask> masks;
    masks.reserve(matrices.size());
    for (const auto& nm : matrices) {
        masks.push_back(UnstructuredMask::all_ones(nm.matrix->rows(), nm.matrix->cols()));
    }
    for (std::size_t i = 0; i < n_prune; ++i) {
        const Entry& e = entries[i];
        masks[e.matrix].bits[e.row * masks[e.matrix].cols + e.col] = 0;
    }
    return masks;
}

std::vector<std::vector<std::size_t>> head_importance(
    const std::vector<std::vector<float>>& gates_per_layer) {
    std::vector<std::vector<std::size_t>> rankings;
    rankings.reserve(gates_per_layer.size());
    for (const auto& gates : gates_per_layer) {
        std::vector<std::size_t> order(gates.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::abs(gates[a]) < std::abs(gates[b]);
        });
        rankings.push_back(std::move(order));
    }
    return rankings;
}

namespace {

void check_kept(const std::vector<std::size_t>& kept, std::size_t bound, const char* what) {
    if (kept.empty()) {
        throw ParameterError(std::string("shrink_update: empty kept ") + what);
    }
    for (std::size_t i = 0; i < kept.size(); ++i) {
        if (kept[i] >= bound) {
            throw ParameterError(std::string("shrink_update: kept ") + what + " out of bounds");
        }
        if (i > 0 && kept[i] <= kept[i - 1]) {
            throw ParameterError(std::string("shrink_update: kept ") + what +
                                 " must be strictly increasing");
        }
    }
}

DenseMatrix slice_rows(const DenseMatrix& m, const std::vector<std::size_t>& kept) {
    DenseMatrix out(kept.size(), m.cols());
    for (std::size_t i = 0; i < kept.size(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(kept[i], j);
    }
    return out;
}

DenseMatrix slice_cols(const DenseMatrix& m, const std::vector<std::size_t>& kept) {
    DenseMatrix out(m.rows(), kept.size());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < kept.size(); ++j) out(i, j) = m(i, kept[j]);
    }
    return out;
}

// old index -> new index, SIZE_MAX for dropped
std::vector<std::size_t> rebase_table(const std::vector<std::size_t>& kept, std::size_t bound) {
    std::vector<std::size_t> table(bound, static_cast<std::size_t>(-1));
    for (std::size_t i = 0; i < kept.size(); ++i) table[kept[i]] = i;
    return table;
}

UnstructuredMask slice_mask(const UnstructuredMask& mask, const std::vector<std::size_t>& rows,
                            const std::vector<std::size_t>& cols) {
    UnstructuredMask out;
    out.rows = rows.size();
    out.cols = cols.size();
    out.bits.resize(rows.size() * cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            out.bits[i * out.cols + j] = mask.bits[rows[i] * mask.cols + cols[j]];
        }
    }
    return out;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
}

// Slices one adapted projection along kept rows/cols, including mask and adapter.
void shrink_linear(AdaptedLinear& lin, const std::vector<std::size_t>& kept_rows,
                   const std::vector<std::size_t>& kept_cols) {
    lin.weight = slice_cols(slice_rows(lin.weight, kept_rows), kept_cols);
    if (lin.mask) {
        lin.mask = slice_mask(*lin.mask, kept_rows, kept_cols);
    }
    if (lin.adapter) {
        lin.adapter = shrink_update(*lin.adapter, kept_rows, kept_cols);
    }
}

} // namespace

SparseLowRankUpdate shrink_update(const SparseLowRankUpdate& upd,
                                  const std::vector<std::size_t>& kept_rows,
                                  const std::vector<std::size_t>& kept_cols) {
    check_kept(kept_rows, upd.host_rows, "rows");
    check_kept(kept_cols, upd.host_cols, "cols");

    SparseLowRankUpdate out;
    out.host_rows = kept_rows.size();
    out.host_cols = kept_cols.size();
    out.u = upd.rank() > 0 ? slice_rows(upd.u, kept_rows) : DenseMatrix(kept_rows.size(), 0);
    out.v = upd.rank() > 0 ? slice_cols(upd.v, kept_cols) : DenseMatrix(0, kept_cols.size());

    const auto row_map = rebase_table(kept_rows, upd.host_rows);
    const auto col_map = rebase_table(kept_cols, upd.host_cols);
    out.support.host_rows = out.host_rows;
    out.support.host_cols = out.host_cols;
    for (std::size_t idx = 0; idx < upd.support.indices.size(); ++idx) {
        const auto& [i, j] = upd.support.indices[idx];
        const std::size_t ni = row_map[i];
        const std::size_t nj = col_map[j];
        if (ni == static_cast<std::size_t>(-1) || nj == static_cast<std::size_t>(-1)) continue;
        out.support.indices.emplace_back(static_cast<std::uint32_t>(ni),
                                         static_cast<std::uint32_t>(nj));
        out.s2_values.push_back(upd.s2_values[idx]);
    }
    // kept sets are sorted, so rebased indices stay lexicographically sorted
    return out;
}

std::vector<std::vector<std::size_t>> kept_heads_after_prune(const ToyTransformer& model,
                                                             double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw ParameterError("prune_heads: ratio must lie in [0, 1)");
    }
    const std::size_t n_heads = model.cfg.n_heads;
    const std::size_t n_drop = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(n_heads)));
    if (n_drop >= n_heads) {
        throw ParameterError("prune_heads: at least one head must survive per layer");
    }
    std::vector<std::vector<float>> gates;
    gates.reserve(model.layers.size());
    for (const auto& layer : model.layers) gates.push_back(layer.gates);
    const auto rankings = head_importance(gates);

    std::vector<std::vector<std::size_t>> kept;
    kept.reserve(rankings.size());
    for (const auto& ranking : rankings) {
        std::vector<std::size_t> layer_kept(ranking.begin() + n_drop, ranking.end());
        std::sort(layer_kept.begin(), layer_kept.end());
        kept.push_back(std::move(layer_kept));
    }
    return kept;
}

std::vector<std::vector<std::size_t>> kept_ffn_after_prune(const ToyTransformer& model,
                                                           double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw ParameterError("prune_ffn: ratio must lie in [0, 1)");
    }
    const std::size_t d_ff = model.cfg.d_ff;
    const std::size_t n_drop = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(d_ff)));
    if (n_drop >= d_ff) {
        throw ParameterError("prune_ffn: at least one intermediate unit must survive");
    }
    std::vector<std::vector<std::size_t>> kept;
    kept.reserve(model.layers.size());
    for (const auto& layer : model.layers) {
        std::vector<double> norms(d_ff, 0.0);
        for (std::size_t i = 0; i < d_ff; ++i) {
            for (std::size_t j = 0; j < layer.ffn_w1.cols(); ++j) {
                const double w = layer.ffn_w1(i, j);
                norms[i] += w * w;
            }
            for (std::size_t j = 0; j < layer.ffn_w2.rows(); ++j) {
                const double w = layer.ffn_w2(j, i);
                norms[i] += w * w;
            }
        }
        std::vector<std::size_t> order = iota_indices(d_ff);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
        std::vector<std::size_t> layer_kept(order.begin() + n_drop, order.end());
        std::sort(layer_kept.begin(), layer_kept.end());
        kept.push_back(std::move(layer_kept));
    }
    return kept;
}

ToyTransformer prune_heads(const ToyTransformer& model, double ratio) {
    const auto kept = kept_heads_after_prune(model, ratio);
    const std::size_t n_heads = model.cfg.n_heads;
    if (kept.empty() || kept.front().size() == n_heads) return model;

    ToyTransformer pruned = model;
    pruned.cfg.n_heads = static_cast<int>(kept.front().size());
    const std::size_t dh = model.head_dim;
    for (std::size_t l = 0; l < pruned.layers.size(); ++l) {
        const std::vector<std::size_t>& kept_heads = kept[l];
        std::vector<std::size_t> kept_slices;
        kept_slices.reserve(kept_heads.size() * dh);
        for (std::size_t head : kept_heads) {
            for (std::size_t e = 0; e < dh; ++e) kept_slices.push_back(head * dh + e);
        }

        EncoderLayer& layer = pruned.layers[l];
        const auto all_cols = iota_indices(layer.wq.weight.cols());
        const auto all_rows = iota_indices(layer.wo.weight.rows());
        shrink_linear(layer.wq, kept_slices, all_cols);
        shrink_linear(layer.wk, kept_slices, all_cols);
        shrink_linear(layer.wv, kept_slices, all_cols);
        shrink_linear(layer.wo, all_rows, kept_slices);

        std::vector<float> kept_gates;
        kept_gates.reserve(kept_heads.size());
        for (std::size_t head : kept_heads) kept_gates.push_back(layer.gates[head]);
        layer.gates = std::move(kept_gates);
    }
    return pruned;
}

ToyTransformer prune_ffn(const ToyTransformer& model, double ratio) {
    const auto kept = kept_ffn_after_prune(model, ratio);
    const std::size_t d_ff = model.cfg.d_ff;
    if (kept.empty() || kept.front().size() == d_ff) return model;

    ToyTransformer pruned = model;
    pruned.cfg.d_ff = static_cast<int>(kept.front().size());
    for (std::size_t l = 0; l < pruned.layers.size(); ++l) {
        EncoderLayer& layer = pruned.layers[l];
        layer.ffn_w1 = slice_rows(layer.ffn_w1, kept[l]);
        layer.ffn_w2 = slice_cols(layer.ffn_w2, kept[l]);
    }
    return pruned;
}

} // namespace dsee
