#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dsee/matrix.hpp"

namespace dsee {

/// Frozen sparse support: sorted, duplicate-free (row, col) index set over a
/// host matrix shape.
struct Support {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> indices;
    std::size_t host_rows = 0;
    std::size_t host_cols = 0;

    std::size_t card() const { return indices.size(); }
    bool contains(std::uint32_t r, std::uint32_t c) const;

    /// Throws ParameterError if indices are unsorted, duplicated or out of bounds.
    void validate() const;
};

/// Output of the sparse-plus-low-rank solver.
struct DecompositionResult {
    DenseMatrix u;                        // m x r
    DenseMatrix v;                        // r x n
    DenseMatrix s;                        // m x n, card(s) <= c
    std::vector<double> residual_history; // ||w - uv - s||_F per iteration
};

enum class SupportMethod {
    Decompose, // sparse residual of the low-rank solve
    Magnitude, // largest-|w| entries
    Random,    // uniform without replacement
};

SupportMethod parse_support_method(const std::string& tag);
std::string support_method_name(SupportMethod method);

struct SolverOptions {
    double tol = 1e-6;
    std::size_t max_iter = 100;
    std::size_t power_iters = 2;
};

/// Alternating sparse-plus-low-rank decomposition of w:
///   (i)  fit rank-r factors to (w - s) with a randomized bilateral sketch,
///   (ii) hard-threshold w - uv keeping the c largest-magnitude entries,
/// until the relative residual change drops below tol or max_iter is reached.
/// Passes that fail to improve the residual are discarded, so residual_history
/// is non-increasing. card(s) <= c holds exactly at every iteration. Ties in
/// the threshold are broken lexicographically by (row, col), smaller index
/// first. r == 0 fixes the low-rank part at zero, reducing the solve to plain
/// magnitude thresholding.
DecompositionResult solve_slr(const DenseMatrix& w, std::size_t r, std::size_t c,
                              double tol, std::size_t max_iter, Rng& rng);

DecompositionResult solve_slr(const DenseMatrix& w, std::size_t r, std::size_t c,
                              const SolverOptions& opts, Rng& rng);

/// Indices of the n_keep largest-|value| entries of s; equal magnitudes are
/// resolved in favor of the lexicographically smaller (row, col).
Support extract_support(const DenseMatrix& s, std::size_t n_keep);

/// Support selection for the update's sparse residual:
///   Decompose -> solve_slr(w, r, c=n_keep) then extract_support of its s
///   Magnitude -> extract_support applied to w itself
///   Random    -> n_keep indices sampled uniformly without replacement
Support select_support(const DenseMatrix& w, SupportMethod method, std::size_t n_keep,
                       std::size_t r, Rng& rng);

Support select_support(const DenseMatrix& w, SupportMethod method, std::size_t n_keep,
                       std::size_t r, const SolverOptions& opts, Rng& rng);

} // namespace dsee
