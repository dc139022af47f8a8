#pragma once

// Shared oracles and generators for the test binaries. Everything here is
// written independently of the library paths it is used to check: the matmul
// oracle is a plain triple loop, singular values come from a Jacobi sweep on
// the Gram matrix, and planted instances are assembled from scratch.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dsee/adapter.hpp"
#include "dsee/matrix.hpp"
#include "dsee/model.hpp"

namespace testsupport {

inline dsee::DenseMatrix matmul_oracle(const dsee::DenseMatrix& a, const dsee::DenseMatrix& b) {
    dsee::DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) {
                acc += static_cast<double>(a(i, p)) * static_cast<double>(b(p, j));
            }
            out(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

// Descending singular values via cyclic Jacobi on the symmetric Gram matrix.
inline std::vector<double> singular_values_oracle(const dsee::DenseMatrix& a) {
    const std::size_t n = a.cols();
    std::vector<double> gram(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.rows(); ++p) {
                acc += static_cast<double>(a(p, i)) * static_cast<double>(a(p, j));
            }
            gram[i * n + j] = acc;
        }
    }
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) off += gram[p * n + q] * gram[p * n + q];
        }
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = gram[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = gram[p * n + p];
                const double aqq = gram[q * n + q];
                const double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
                const double c = std::cos(theta), s = std::sin(theta);
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = gram[k * n + p];
                    const double akq = gram[k * n + q];
                    gram[k * n + p] = c * akp - s * akq;
                    gram[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = gram[p * n + k];
                    const double aqk = gram[q * n + k];
                    gram[p * n + k] = c * apk - s * aqk;
                    gram[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> sv(n);
    for (std::size_t i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, gram[i * n + i]));
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

inline double best_rank_r_error(const dsee::DenseMatrix& a, std::size_t r) {
    const auto sv = singular_values_oracle(a);
    double tail = 0.0;
    for (std::size_t i = r; i < sv.size(); ++i) tail += sv[i] * sv[i];
    return std::sqrt(tail);
}

struct PlantedInstance {
    dsee::DenseMatrix w;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> spikes; // sorted
};

// Low-rank gaussian product plus sparse spikes of +-factor x the low-rank RMS
// entry, at distinct random positions.
inline PlantedInstance make_planted(std::size_t m, std::size_t n, std::size_t rank,
                                    std::size_t n_spikes, double factor, dsee::Rng& rng) {
    dsee::DenseMatrix g1 = dsee::gaussian_matrix(m, rank, rng);
    dsee::DenseMatrix g2 = dsee::gaussian_matrix(rank, n, rng);
    dsee::DenseMatrix low = matmul_oracle(g1, g2);
    const double rms = dsee::frobenius_norm(low) / std::sqrt(static_cast<double>(m * n));

    std::set<std::pair<std::uint32_t, std::uint32_t>> positions;
    while (positions.size() < n_spikes) {
        positions.insert({static_cast<std::uint32_t>(rng.bounded(m)),
                          static_cast<std::uint32_t>(rng.bounded(n))});
    }
    PlantedInstance instance;
    instance.w = low;
    for (const auto& [i, j] : positions) {
        const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
        instance.w(i, j) += static_cast<float>(sign * factor * rms);
        instance.spikes.emplace_back(i, j);
    }
    return instance;
}

// Dense rendering of the three-term adapter forward: (w (.) mask + uv + s2) x.
inline dsee::DenseMatrix adapter_forward_oracle(const dsee::DenseMatrix& x,
                                                const dsee::DenseMatrix& w,
                                                const std::optional<dsee::UnstructuredMask>& mask,
                                                const dsee::SparseLowRankUpdate& upd) {
    dsee::DenseMatrix effective(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            effective(i, j) = (!mask || mask->kept(i, j)) ? w(i, j) : 0.0f;
        }
    }
    if (upd.rank() > 0) {
        const dsee::DenseMatrix uv = matmul_oracle(upd.u, upd.v);
        for (std::size_t i = 0; i < w.rows(); ++i) {
            for (std::size_t j = 0; j < w.cols(); ++j) effective(i, j) += uv(i, j);
        }
    }
    for (std::size_t k = 0; k < upd.support.indices.size(); ++k) {
        const auto& [i, j] = upd.support.indices[k];
        effective(i, j) += upd.s2_values[k];
    }
    return matmul_oracle(effective, x);
}

struct FdFailure {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct FdOutcome {
    bool ok = true;
    FdFailure worst;
    double worst_gap = 0.0;
};

// Central finite differences against backward() for every parameter group.
// The denominator uses the actual f32 step (theta_plus - theta_minus), and the
// loss is evaluated through the f64 path. Pass if |diff| <= abs_tol or
// |diff| <= rel_tol * max(|fd|, |grad|).
inline FdOutcome finite_difference_check(dsee::ToyTransformer& model,
                                         const dsee::TokenBatch& tokens,
                                         const std::vector<int>& labels, double lambda_l1,
                                         double eps = 1e-3, double rel_tol = 1e-4,
                                         double abs_tol = 1e-6) {
    const dsee::BackwardResult back = dsee::backward(model, tokens, labels, lambda_l1);
    FdOutcome outcome;
    for (dsee::ParamView& view : dsee::named_parameters(model)) {
        const dsee::GradBuffer& grad = back.grads.at(view.name);
        for (std::size_t i = 0; i < view.size; ++i) {
            const float original = view.data[i];
            const float plus = static_cast<float>(static_cast<double>(original) + eps);
            const float minus = static_cast<float>(static_cast<double>(original) - eps);
            view.data[i] = plus;
            const double loss_plus = dsee::eval_loss(model, tokens, labels, lambda_l1);
            view.data[i] = minus;
            const double loss_minus = dsee::eval_loss(model, tokens, labels, lambda_l1);
            view.data[i] = original;
            const double fd = (loss_plus - loss_minus) /
                              (static_cast<double>(plus) - static_cast<double>(minus));
            const double g = grad.values[i];
            const double diff = std::abs(fd - g);
            const double scale = std::max(std::abs(fd), std::abs(g));
            const bool ok = diff <= abs_tol || diff <= rel_tol * scale;
            const double gap = diff / std::max(scale, 1e-12);
            if (!ok) {
                outcome.ok = false;
                if (gap > outcome.worst_gap) {
                    outcome.worst_gap = gap;
                    outcome.worst = {view.name, i, g, fd};
                }
            }
        }
    }
    return outcome;
}

} // namespace testsupport
