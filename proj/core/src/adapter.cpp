#include "dsee/adapter.hpp"

#include <cmath>

namespace dsee {

UnstructuredMask UnstructuredMask::all_ones(std::size_t rows, std::size_t cols) {
    UnstructuredMask mask;
    mask.rows = rows;
    mask.cols = cols;
    mask.bits.assign(rows * cols, 1);
    return mask;
}

std::size_t UnstructuredMask::kept_count() const {
    std::size_t count = 0;
    for (std::uint8_t b : bits) count += (b != 0);
    return count;
}

double UnstructuredMask::sparsity() const {
    if (bits.empty()) return 0.0;
    return 1.0 - static_cast<double>(kept_count()) / static_cast<double>(bits.size());
}

DenseMatrix SparseLowRankUpdate::delta_dense() const {
    DenseMatrix delta(host_rows, host_cols);
    if (rank() > 0) {
        delta = matmul(u, v);
    }
    for (std::size_t k = 0; k < support.indices.size(); ++k) {
        const auto& [i, j] = support.indices[k];
        delta(i, j) += s2_values[k];
    }
    return delta;
}

SparseLowRankUpdate init_update(const DenseMatrix& w, std::size_t r, std::size_t n_keep,
                                SupportMethod method, Rng& rng) {
    return init_update(w, r, n_keep, method, SolverOptions{}, rng);
}

SparseLowRankUpdate init_update(const DenseMatrix& w, std::size_t r, std::size_t n_keep,
                                SupportMethod method, const SolverOptions& opts, Rng& rng) {
    if (r > std::min(w.rows(), w.cols())) {
        throw ParameterError("init_update: r=" + std::to_string(r) + " exceeds min" +
                             w.shape_str());
    }
    SparseLowRankUpdate upd;
    upd.host_rows = w.rows();
    upd.host_cols = w.cols();
    upd.support = select_support(w, method, n_keep, r, opts, rng);
    upd.u = DenseMatrix(w.rows(), r);
    upd.v = gaussian_matrix(r, w.cols(), rng, 0.0, 0.02);
    upd.s2_values.assign(upd.support.card(), 0.0f);
    return upd;
}

DenseMatrix project_onto_support(const DenseMatrix& values, const Support& support) {
    if (values.rows() != support.host_rows || values.cols() != support.host_cols) {
        throw ShapeError("project_onto_support: " + values.shape_str() + " vs support host " +
                         std::to_string(support.host_rows) + "x" +
                         std::to_string(support.host_cols));
    }
    DenseMatrix out(values.rows(), values.cols());
    for (const auto& [i, j] : support.indices) {
        out(i, j) = values(i, j);
    }
    return out;
}

namespace {

void check_adapter_shapes(const DenseMatrix& w, const std::optional<UnstructuredMask>& mask,
                          const SparseLowRankUpdate& upd) {
    if (upd.host_rows != w.rows() || upd.host_cols != w.cols()) {
        throw ShapeError("adapter host shape " + std::to_string(upd.host_rows) + "x" +
                         std::to_string(upd.host_cols) + " vs weights " + w.shape_str());
    }
    if (mask && (mask->rows != w.rows() || mask->cols != w.cols())) {
        throw ShapeError("mask shape mismatch vs weights " + w.shape_str());
    }
    if (upd.rank() > 0 && (upd.u.rows() != w.rows() || upd.v.cols() != w.cols() ||
                           upd.u.cols() != upd.v.rows())) {
        throw ShapeError("adapter factor shapes inconsistent with weights " + w.shape_str());
    }
}

} // namespace

DenseMatrix adapter_forward(const DenseMatrix& x, const DenseMatrix& w,
                            const std::optional<UnstructuredMask>& mask,
                            const SparseLowRankUpdate& upd) {
    check_adapter_shapes(w, mask, upd);
    if (x.rows() != w.cols()) {
        throw ShapeError("adapter_forward: x " + x.shape_str() + " vs weights " + w.shape_str());
    }
    const std::size_t m = w.rows(), n = w.cols(), b = x.cols();
    DenseMatrix y(m, b);

    // (w (.) mask) x
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t col = 0; col < b; ++col) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (mask && !mask->kept(i, j)) continue;
                acc += static_cast<double>(w(i, j)) * x(j, col);
            }
            y(i, col) = static_cast<float>(acc);
        }
    }

    // u (v x): (m + n) * r * b work
    if (upd.rank() > 0) {
        DenseMatrix vx = matmul(upd.v, x); // r x b
        const std::size_t r = upd.rank();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t col = 0; col < b; ++col) {
                double acc = 0.0;
                for (std::size_t p = 0; p < r; ++p) {
                    acc += static_cast<double>(upd.u(i, p)) * vx(p, col);
                }
                y(i, col) += static_cast<float>(acc);
            }
        }
    }

    // s2 x straight from coordinates: card * b work
    for (std::size_t k = 0; k < upd.support.indices.size(); ++k) {
        const auto& [i, j] = upd.support.indices[k];
        const double s = upd.s2_values[k];
        for (std::size_t col = 0; col < b; ++col) {
            y(i, col) += static_cast<float>(s * x(j, col));
        }
    }
    y.check_finite("adapter_forward");
    return y;
}

DenseMatrix merge(const DenseMatrix& w, const std::optional<UnstructuredMask>& mask,
                  const SparseLowRankUpdate& upd) {
    check_adapter_shapes(w, mask, upd);
    DenseMatrix merged = upd.delta_dense();
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            if (!mask || mask->kept(i, j)) {
                merged(i, j) += w(i, j);
            }
        }
    }
    merged.check_finite("merge");
    return merged;
}

} // namespace dsee
