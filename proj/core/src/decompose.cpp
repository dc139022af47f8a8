#include "dsee/decompose.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dsee {

bool Support::contains(std::uint32_t r, std::uint32_t c) const {
    return std::binary_search(indices.begin(), indices.end(), std::make_pair(r, c));
}

void Support::validate() const {
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& [r, c] = indices[i];
        if (r >= host_rows || c >= host_cols) {
            throw ParameterError("Support: index out of bounds");
        }
        if (i > 0 && !(indices[i - 1] < indices[i])) {
            throw ParameterError("Support: indices not strictly sorted");
        }
    }
}

SupportMethod parse_support_method(const std::string& tag) {
    if (tag == "decompose") return SupportMethod::Decompose;
    if (tag == "magnitude") return SupportMethod::Magnitude;
    if (tag == "random") return SupportMethod::Random;
    throw ParameterError("unknown support method '" + tag + "'");
}

std::string support_method_name(SupportMethod method) {
    switch (method) {
        case SupportMethod::Decompose: return "decompose";
        case SupportMethod::Magnitude: return "magnitude";
        case SupportMethod::Random: return "random";
    }
    throw ParameterError("unknown support method tag");
}

namespace {

struct Candidate {
    float magnitude;
    std::uint32_t row;
    std::uint32_t col;
};

// Magnitude descending, then (row, col) ascending.
bool better(const Candidate& a, const Candidate& b) {
    if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
    if (a.row != b.row) return a.row < b.row;
    return a.col < b.col;
}

std::vector<Candidate> top_magnitudes(const DenseMatrix& m, std::size_t n_keep) {
    std::vector<Candidate> all;
    all.reserve(m.size());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            all.push_back({std::abs(m(i, j)),
                           static_cast<std::uint32_t>(i),
                           static_cast<std::uint32_t>(j)});
        }
    }
    if (n_keep < all.size()) {
        std::nth_element(all.begin(), all.begin() + n_keep, all.end(), better);
        all.resize(n_keep);
    }
    return all;
}

// Keep the c largest-magnitude entries of `values`, everything else zeroed.
DenseMatrix hard_threshold(const DenseMatrix& values, std::size_t c) {
    DenseMatrix out(values.rows(), values.cols());
    for (const auto& cand : top_magnitudes(values, c)) {
        out(cand.row, cand.col) = values(cand.row, cand.col);
    }
    return out;
}

} // namespace

DecompositionResult solve_slr(const DenseMatrix& w, std::size_t r, std::size_t c,
                              double tol, std::size_t max_iter, Rng& rng) {
    SolverOptions opts;
    opts.tol = tol;
    opts.max_iter = max_iter;
    return solve_slr(w, r, c, opts, rng);
}

DecompositionResult solve_slr(const DenseMatrix& w, std::size_t r, std::size_t c,
                              const SolverOptions& opts, Rng& rng) {
    const std::size_t m = w.rows(), n = w.cols();
    w.check_finite("solve_slr input");
    if (r > std::min(m, n)) {
        throw ParameterError("solve_slr: r=" + std::to_string(r) + " exceeds min" + w.shape_str());
    }
    if (c > m * n) {
        throw ParameterError("solve_slr: c=" + std::to_string(c) + " exceeds matrix size");
    }
    if (!(opts.tol > 0.0)) {
        throw ParameterError("solve_slr: tol must be positive");
    }
    if (opts.max_iter == 0) {
        throw ParameterError("solve_slr: max_iter must be positive");
    }

    const double floor = 1e-13 * std::max(1.0, frobenius_norm(w));
    DecompositionResult result;
    result.u = DenseMatrix(m, r);
    result.v = DenseMatrix(r, n);
    result.s = DenseMatrix(m, n);
    // The randomized fit resamples its sketch every pass, so raw residuals
    // wobble once the f32 floor is reached. Iterates that fail to improve are
    // discarded, keeping the recorded trace non-increasing and letting the
    // stall criterion terminate the loop.
    double best_res = std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < opts.max_iter; ++it) {
        DenseMatrix target = subtract(w, result.s);
        LowRankFactors lr = randomized_low_rank(target, r, opts.power_iters, rng);
        DenseMatrix low_rank = matmul(lr.u, lr.v);
        DenseMatrix residual_after_lr = subtract(w, low_rank);
        DenseMatrix s = hard_threshold(residual_after_lr, c);
        const double res = frobenius_norm(subtract(residual_after_lr, s));
        if (res <= best_res) {
            best_res = res;
            result.u = std::move(lr.u);
            result.v = std::move(lr.v);
            result.s = std::move(s);
        }
        result.residual_history.push_back(best_res);
        if (best_res <= floor) break;
        const std::size_t h = result.residual_history.size();
        if (h >= 2 && std::abs(result.residual_history[h - 1] - result.residual_history[h - 2]) /
                              std::max(result.residual_history[h - 2], 1e-12) <
                          opts.tol) {
            break;
        }
    }
    return result;
}

Support extract_support(const DenseMatrix& s, std::size_t n_keep) {
    if (n_keep > s.size()) {
        throw ParameterError("extract_support: n_keep=" + std::to_string(n_keep) +
                             " exceeds matrix size " + std::to_string(s.size()));
    }
    Support support;
    support.host_rows = s.rows();
    support.host_cols = s.cols();
    auto kept = top_magnitudes(s, n_keep);
    support.indices.reserve(kept.size());
    for (const auto& cand : kept) {
        support.indices.emplace_back(cand.row, cand.col);
    }
    std::sort(support.indices.begin(), support.indices.end());
    return support;
}

Support select_support(const DenseMatrix& w, SupportMethod method, std::size_t n_keep,
                       std::size_t r, Rng& rng) {
    return select_support(w, method, n_keep, r, SolverOptions{}, rng);
}

Support select_support(const DenseMatrix& w, SupportMethod method, std::size_t n_keep,
                       std::size_t r, const SolverOptions& opts, Rng& rng) {
    if (n_keep > w.size()) {
        throw ParameterError("select_support: n_keep exceeds matrix size");
    }
    switch (method) {
        case SupportMethod::Decompose: {
            DecompositionResult dec = solve_slr(w, r, n_keep, opts, rng);
            return extract_support(dec.s, n_keep);
        }
        case SupportMethod::Magnitude:
            return extract_support(w, n_keep);
        case SupportMethod::Random: {
            // partial Fisher-Yates over flat indices
            const std::size_t total = w.size();
            std::vector<std::uint64_t> flat(total);
            for (std::size_t i = 0; i < total; ++i) flat[i] = i;
            Support support;
            support.host_rows = w.rows();
            support.host_cols = w.cols();
            support.indices.reserve(n_keep);
            for (std::size_t i = 0; i < n_keep; ++i) {
                const std::uint64_t j = i + rng.bounded(total - i);
                std::swap(flat[i], flat[j]);
                support.indices.emplace_back(
                    static_cast<std::uint32_t>(flat[i] / w.cols()),
                    static_cast<std::uint32_t>(flat[i] % w.cols()));
            }
            std::sort(support.indices.begin(), support.indices.end());
            return support;
        }
    }
    throw ParameterError("select_support: unknown method tag");
}

} // namespace dsee
