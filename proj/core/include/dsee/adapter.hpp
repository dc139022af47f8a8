#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dsee/decompose.hpp"
#include "dsee/matrix.hpp"

namespace dsee {

/// Binary keep/drop mask over a weight matrix. Bit true = entry kept.
struct UnstructuredMask {
    std::vector<std::uint8_t> bits; // row-major, length rows*cols
    std::size_t rows = 0;
    std::size_t cols = 0;

    static UnstructuredMask all_ones(std::size_t rows, std::size_t cols);

    bool kept(std::size_t i, std::size_t j) const { return bits[i * cols + j] != 0; }
    std::size_t kept_count() const;

    /// Fraction of entries masked off: 1 - kept/(rows*cols).
    double sparsity() const;
};

/// Trainable weight update delta = u*v + s2 with the sparse part pinned to a
/// frozen support. Only supported values of s2 are stored, so the update is
/// structurally zero off the support no matter how it is trained.
struct SparseLowRankUpdate {
    DenseMatrix u;                 // m x r, zero-initialized
    DenseMatrix v;                 // r x n, N(0, 0.02) initialized
    std::vector<float> s2_values;  // aligned 1:1 with support.indices
    Support support;
    std::size_t host_rows = 0;
    std::size_t host_cols = 0;

    std::size_t rank() const { return u.cols(); }
    std::size_t trainable_count() const { return u.size() + v.size() + s2_values.size(); }

    /// Dense rendering of u*v + s2.
    DenseMatrix delta_dense() const;
};

/// Builds a fresh update for host weights w: support from select_support,
/// u zeroed, v ~ N(0, 0.02), s2 zeroed, so delta_dense() == 0 at step 0.
/// r == 0 yields a sparse-only update (no low-rank factors).
SparseLowRankUpdate init_update(const DenseMatrix& w, std::size_t r, std::size_t n_keep,
                                SupportMethod method, Rng& rng);

SparseLowRankUpdate init_update(const DenseMatrix& w, std::size_t r, std::size_t n_keep,
                                SupportMethod method, const SolverOptions& opts, Rng& rng);

/// Keeps entries on the support, zeroes the complement.
DenseMatrix project_onto_support(const DenseMatrix& values, const Support& support);

/// y = (w (.) mask) x + u (v x) + s2 x for x of shape n x b.
/// The low-rank term is evaluated as two skinny products and the sparse term
/// straight from the coordinate storage; the dense delta is never formed.
DenseMatrix adapter_forward(const DenseMatrix& x, const DenseMatrix& w,
                            const std::optional<UnstructuredMask>& mask,
                            const SparseLowRankUpdate& upd);

/// Deployment-time dense weights: w (.) mask + u v + s2.
DenseMatrix merge(const DenseMatrix& w, const std::optional<UnstructuredMask>& mask,
                  const SparseLowRankUpdate& upd);

} // namespace dsee
