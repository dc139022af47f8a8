#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dsee/errors.hpp"

namespace dsee {

/// Row-major dense matrix of 32-bit floats. The universal weight/activation
/// carrier: entries are validated to be finite on construction and whenever a
/// library operation produces a new matrix.
///
/// Zero-sized dimensions are permitted so that rank-0 factor matrices (m x 0,
/// 0 x n) can represent "no low-rank part" configurations.
class DenseMatrix {
public:
    DenseMatrix() : rows_(0), cols_(0) {}

    /// Zero-filled matrix.
    DenseMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

    /// Takes ownership of row-major data; throws ShapeError on length mismatch
    /// and InputError on non-finite entries.
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    /// Convenience literal constructor: DenseMatrix::from_rows({{1,2},{3,4}}).
    static DenseMatrix from_rows(const std::vector<std::vector<float>>& rows);

    static DenseMatrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    float operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    /// Bounds-checked access.
    float at(std::size_t i, std::size_t j) const;

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    bool same_shape(const DenseMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool operator==(const DenseMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

    /// Throws InputError if any entry is NaN or infinite.
    void check_finite(std::string_view what) const;

    std::string shape_str() const;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<float> data_;
};

/// Deterministic pseudorandom generator with a standard-normal sampler.
///
/// The stream is fully pinned: xoshiro256++ state seeded through SplitMix64,
/// uniforms taken from the top 53 bits, normals via Box-Muller with the spare
/// value cached. Identical seeds give bit-identical sample streams on every
/// platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform double in [0, 1).
    double uniform01();

    /// Unbiased uniform integer in [0, n); n must be positive.
    std::uint64_t bounded(std::uint64_t n);

    /// Standard normal sample (Box-Muller).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Independent child stream keyed on (this stream's seed, label).
    /// Does not consume from or disturb the parent stream.
    Rng derive(std::string_view label) const;
    Rng derive(std::uint64_t salt) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---- dense kernels ---------------------------------------------------------

/// Matrix product a*b with 64-bit accumulation, result rounded to 32-bit.
/// Throws ShapeError when a.cols != b.rows.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);

DenseMatrix transpose(const DenseMatrix& a);

/// Entry-wise a + b / a - b (shape-checked).
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix subtract(const DenseMatrix& a, const DenseMatrix& b);

double frobenius_norm(const DenseMatrix& a);

/// Max |a - b| over entries; shapes must match.
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

/// Gaussian matrix with i.i.d. N(mean, stddev^2) entries sampled row-major.
DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                            double mean = 0.0, double stddev = 1.0);

/// Orthonormal basis for the column span of b (modified Gram-Schmidt with a
/// re-orthogonalization pass). Requires b.rows >= b.cols; throws
/// DegenerateInputError when a column's residual norm falls below 1e-10.
DenseMatrix orthonormalize(const DenseMatrix& b);

struct LowRankFactors {
    DenseMatrix u; // m x r
    DenseMatrix v; // r x n
};

/// Randomized rank-r factorization a ~ u*v via a Gaussian range sketch with
/// power iterations (orthonormalized between passes). Columns of the sample
/// matrix that collapse numerically are zeroed rather than rejected, so
/// rank-deficient inputs (including the zero matrix) factor cleanly.
/// Throws ParameterError when r > min(m, n).
LowRankFactors randomized_low_rank(const DenseMatrix& a, std::size_t r,
                                   std::size_t power_iters, Rng& rng);

} // namespace dsee
