#include "dsee/matrix.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace dsee {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    check_finite("DenseMatrix construction");
}

DenseMatrix DenseMatrix::from_rows(const std::vector<std::vector<float>>& rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m == 0 ? 0 : rows.front().size();
    std::vector<float> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
        if (row.size() != n) {
            throw ShapeError("DenseMatrix::from_rows: ragged rows");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return DenseMatrix(m, n, std::move(data));
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0f;
    return out;
}

float DenseMatrix::at(std::size_t i, std::size_t j) const {
    if (i >= rows_ || j >= cols_) {
        throw ShapeError("DenseMatrix::at: index (" + std::to_string(i) + "," +
                         std::to_string(j) + ") outside " + shape_str());
    }
    return (*this)(i, j);
}

void DenseMatrix::check_finite(std::string_view what) const {
    for (float v : data_) {
        if (!std::isfinite(v)) {
            throw InputError(std::string(what) + ": non-finite entry");
        }
    }
}

std::string DenseMatrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

// ---- Rng -------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::bounded(std::uint64_t n) {
    if (n == 0) {
        throw ParameterError("Rng::bounded: n must be positive");
    }
    // rejection sampling over the largest multiple of n
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t x = next_u64();
        if (x >= threshold) return x % n;
    }
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Rng Rng::derive(std::string_view label) const {
    return derive(fnv1a64(label));
}

Rng Rng::derive(std::uint64_t salt) const {
    std::uint64_t mix = seed_ ^ (salt + 0x9E3779B97F4A7C15ULL + (seed_ << 6) + (seed_ >> 2));
    return Rng(mix);
}

// ---- kernels ---------------------------------------------------------------

namespace {

float round_to_f32(double v, std::string_view what) {
    const float r = static_cast<float>(v);
    if (!std::isfinite(r)) {
        throw InputError(std::string(what) + ": non-finite result");
    }
    return r;
}

} // namespace

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + a.shape_str() + " x " + b.shape_str());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    DenseMatrix out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += static_cast<double>(a(i, p)) * static_cast<double>(b(p, j));
            }
            out(i, j) = round_to_f32(acc, "matmul");
        }
    }
    return out;
}

DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: " + a.shape_str() + " vs " + b.shape_str());
    }
    DenseMatrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = round_to_f32(static_cast<double>(a.data()[i]) + b.data()[i], "add");
    }
    return out;
}

DenseMatrix subtract(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("subtract: " + a.shape_str() + " vs " + b.shape_str());
    }
    DenseMatrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = round_to_f32(static_cast<double>(a.data()[i]) - b.data()[i], "subtract");
    }
    return out;
}

double frobenius_norm(const DenseMatrix& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    }
    return worst;
}

DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                            double mean, double stddev) {
    DenseMatrix out(rows, cols);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = static_cast<float>(rng.normal(mean, stddev));
    }
    return out;
}

namespace {

constexpr double kRankDeficientTol = 1e-10;

// Modified Gram-Schmidt in f64 working storage. When `zero_degenerate` is set,
// columns whose residual norm drops below the tolerance become zero columns
// instead of raising DegenerateInputError.
std::vector<double> mgs(const DenseMatrix& b, bool zero_degenerate) {
    const std::size_t m = b.rows(), n = b.cols();
    std::vector<double> q(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) q[i * n + j] = b(i, j);

    for (std::size_t j = 0; j < n; ++j) {
        // two projection passes for stability
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t p = 0; p < j; ++p) {
                double dot = 0.0;
                for (std::size_t i = 0; i < m; ++i) dot += q[i * n + p] * q[i * n + j];
                for (std::size_t i = 0; i < m; ++i) q[i * n + j] -= dot * q[i * n + p];
            }
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < m; ++i) norm += q[i * n + j] * q[i * n + j];
        norm = std::sqrt(norm);
        if (norm < kRankDeficientTol) {
            if (!zero_degenerate) {
                throw DegenerateInputError("orthonormalize: column " + std::to_string(j) +
                                           " is numerically rank-deficient (norm " +
                                           std::to_string(norm) + ")");
            }
            for (std::size_t i = 0; i < m; ++i) q[i * n + j] = 0.0;
        } else {
            const double inv = 1.0 / norm;
            for (std::size_t i = 0; i < m; ++i) q[i * n + j] *= inv;
        }
    }
    return q;
}

DenseMatrix mgs_to_matrix(const std::vector<double>& q, std::size_t m, std::size_t n) {
    DenseMatrix out(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<float>(q[i * n + j]);
    return out;
}

DenseMatrix orthonormalize_or_zero(const DenseMatrix& b) {
    return mgs_to_matrix(mgs(b, /*zero_degenerate=*/true), b.rows(), b.cols());
}

} // namespace

DenseMatrix orthonormalize(const DenseMatrix& b) {
    if (b.rows() < b.cols()) {
        throw ShapeError("orthonormalize: needs rows >= cols, got " + b.shape_str());
    }
    return mgs_to_matrix(mgs(b, /*zero_degenerate=*/false), b.rows(), b.cols());
}

LowRankFactors randomized_low_rank(const DenseMatrix& a, std::size_t r,
                                   std::size_t power_iters, Rng& rng) {
    const std::size_t m = a.rows(), n = a.cols();
    if (r > std::min(m, n)) {
        throw ParameterError("randomized_low_rank: r=" + std::to_string(r) +
                             " exceeds min" + a.shape_str());
    }
    a.check_finite("randomized_low_rank input");
    if (r == 0) {
        return {DenseMatrix(m, 0), DenseMatrix(0, n)};
    }

    DenseMatrix sketch = gaussian_matrix(n, r, rng);
    DenseMatrix y = matmul(a, sketch); // m x r
    const DenseMatrix at = transpose(a);
    for (std::size_t it = 0; it < power_iters; ++it) {
        y = orthonormalize_or_zero(y);
        DenseMatrix z = matmul(at, y); // n x r
        z = orthonormalize_or_zero(z);
        y = matmul(a, z);
    }
    DenseMatrix q = orthonormalize_or_zero(y); // m x r
    DenseMatrix v = matmul(transpose(q), a);   // r x n
    return {std::move(q), std::move(v)};
}

} // namespace dsee
