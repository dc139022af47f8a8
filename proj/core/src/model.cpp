#include "dsee/model.hpp"

#include <algorithm>
#include <cmath>

namespace dsee {

void ToyTransformerConfig::validate() const {
    if (vocab_size <= 0 || seq_len <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 ||
        n_layers <= 0 || n_classes <= 0) {
        throw ParameterError("ToyTransformerConfig: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ParameterError("ToyTransformerConfig: d_model must be divisible by n_heads");
    }
}

ToyTransformer ToyTransformer::init(const ToyTransformerConfig& cfg, Rng& rng) {
    cfg.validate();
    ToyTransformer m;
    m.cfg = cfg;
    m.head_dim = cfg.d_model / cfg.n_heads;
    m.tok_emb = gaussian_matrix(cfg.vocab_size, cfg.d_model, rng, 0.0, 0.02);
    m.pos_emb = gaussian_matrix(cfg.seq_len, cfg.d_model, rng, 0.0, 0.02);
    m.layers.resize(cfg.n_layers);
    const std::size_t d = cfg.d_model;
    for (auto& layer : m.layers) {
        layer.ln1_gamma.assign(d, 1.0f);
        layer.ln1_beta.assign(d, 0.0f);
        layer.wq.weight = gaussian_matrix(d, d, rng, 0.0, 0.02);
        layer.wk.weight = gaussian_matrix(d, d, rng, 0.0, 0.02);
        layer.wv.weight = gaussian_matrix(d, d, rng, 0.0, 0.02);
        layer.wo.weight = gaussian_matrix(d, d, rng, 0.0, 0.02);
        layer.gates.assign(cfg.n_heads, 1.0f);
        layer.ln2_gamma.assign(d, 1.0f);
        layer.ln2_beta.assign(d, 0.0f);
        layer.ffn_w1 = gaussian_matrix(cfg.d_ff, d, rng, 0.0, 0.02);
        layer.ffn_w2 = gaussian_matrix(d, cfg.d_ff, rng, 0.0, 0.02);
    }
    m.cls_weight = gaussian_matrix(cfg.n_classes, d, rng, 0.0, 0.02);
    m.cls_bias.assign(cfg.n_classes, 0.0f);
    return m;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<std::int32_t>>& rows) {
    TokenBatch batch;
    batch.batch = rows.size();
    batch.seq = rows.empty() ? 0 : rows.front().size();
    batch.ids.reserve(batch.batch * batch.seq);
    for (const auto& row : rows) {
        if (row.size() != batch.seq) {
            throw ShapeError("TokenBatch::from_rows: ragged rows");
        }
        batch.ids.insert(batch.ids.end(), row.begin(), row.end());
    }
    return batch;
}

// ---- parameter registry ----------------------------------------------------

namespace {

template <typename ModelT, typename Fn>
void for_each_param(ModelT& m, Fn&& fn) {
    auto mat = [&](const std::string& name, ParamKind kind, auto& matrix) {
        if (matrix.size() == 0) return;
        fn(name, kind, matrix.data().data(), matrix.size(),
           std::vector<std::size_t>{matrix.rows(), matrix.cols()});
    };
    auto vec = [&](const std::string& name, ParamKind kind, auto& v) {
        if (v.empty()) return;
        fn(name, kind, v.data(), v.size(), std::vector<std::size_t>{v.size()});
    };

    mat("tok_emb", ParamKind::Pretrained, m.tok_emb);
    mat("pos_emb", ParamKind::Pretrained, m.pos_emb);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& layer = m.layers[l];
        const std::string base = "layers." + std::to_string(l) + ".";
        vec(base + "ln1.gamma", ParamKind::Pretrained, layer.ln1_gamma);
        vec(base + "ln1.beta", ParamKind::Pretrained, layer.ln1_beta);
        const std::pair<const char*, decltype(&layer.wq)> projs[] = {
            {"q", &layer.wq}, {"k", &layer.wk}, {"v", &layer.wv}, {"o", &layer.wo}};
        for (const auto& [tag, lin] : projs) {
            const std::string stem = base + "attn." + tag + ".";
            mat(stem + "weight", ParamKind::Pretrained, lin->weight);
            if (lin->adapter) {
                mat(stem + "adapter.u", ParamKind::AdapterU, lin->adapter->u);
                mat(stem + "adapter.v", ParamKind::AdapterV, lin->adapter->v);
                vec(stem + "adapter.s2", ParamKind::AdapterS2, lin->adapter->s2_values);
            }
        }
        vec(base + "gates", ParamKind::Gate, layer.gates);
        vec(base + "ln2.gamma", ParamKind::Pretrained, layer.ln2_gamma);
        vec(base + "ln2.beta", ParamKind::Pretrained, layer.ln2_beta);
        mat(base + "ffn.w1", ParamKind::Pretrained, layer.ffn_w1);
        mat(base + "ffn.w2", ParamKind::Pretrained, layer.ffn_w2);
    }
    mat("classifier.weight", ParamKind::Classifier, m.cls_weight);
    vec("classifier.bias", ParamKind::Classifier, m.cls_bias);
}

} // namespace

std::vector<ParamView> named_parameters(ToyTransformer& model) {
    std::vector<ParamView> out;
    for_each_param(model, [&](const std::string& name, ParamKind kind, float* data,
                              std::size_t size, std::vector<std::size_t> shape) {
        out.push_back({name, kind, data, size, std::move(shape)});
    });
    return out;
}

const GradBuffer& GradientSet::at(const std::string& name) const {
    auto it = buffers.find(name);
    if (it == buffers.end()) {
        throw ParameterError("GradientSet: no gradient for '" + name + "'");
    }
    return it->second;
}

GradBuffer& GradientSet::at(const std::string& name) {
    auto it = buffers.find(name);
    if (it == buffers.end()) {
        throw ParameterError("GradientSet: no gradient for '" + name + "'");
    }
    return it->second;
}

void GradientSet::check_finite() const {
    for (const auto& [name, buf] : buffers) {
        for (double v : buf.values) {
            if (!std::isfinite(v)) {
                throw TrainingError("non-finite gradient in '" + name + "'");
            }
        }
    }
}

// ---- f64 engine -------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu(double z) {
    return 0.5 * z * (1.0 + std::erf(z * 0.7071067811865475244));
}

double gelu_grad(double z) {
    const double cdf = 0.5 * (1.0 + std::erf(z * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * z * z) * kInvSqrt2Pi;
    return cdf + z * pdf;
}

// y[m] = (w (.) mask) x + u (v x) + s2 x; vx_out caches v x when an adapter
// with positive rank is present.
void adapted_apply(const AdaptedLinear& lin, const double* x, double* y, double* vx_out) {
    const std::size_t m = lin.weight.rows(), n = lin.weight.cols();
    const UnstructuredMask* mask = lin.mask ? &*lin.mask : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        const float* wrow = lin.weight.data().data() + i * n;
        if (mask) {
            const std::uint8_t* mrow = mask->bits.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                if (mrow[j]) acc += static_cast<double>(wrow[j]) * x[j];
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(wrow[j]) * x[j];
        }
        y[i] = acc;
    }
    if (!lin.adapter) return;
    const SparseLowRankUpdate& ad = *lin.adapter;
    const std::size_t r = ad.rank();
    if (r > 0) {
        for (std::size_t p = 0; p < r; ++p) {
            double acc = 0.0;
            const float* vrow = ad.v.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(vrow[j]) * x[j];
            vx_out[p] = acc;
        }
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            const float* urow = ad.u.data().data() + i * r;
            for (std::size_t p = 0; p < r; ++p) acc += static_cast<double>(urow[p]) * vx_out[p];
            y[i] += acc;
        }
    }
    for (std::size_t idx = 0; idx < ad.support.indices.size(); ++idx) {
        const auto& [i, j] = ad.support.indices[idx];
        y[i] += static_cast<double>(ad.s2_values[idx]) * x[j];
    }
}

// Accumulates dx plus the gradient buffers owned by this projection.
void adapted_backward(const AdaptedLinear& lin, const double* x, const double* vx,
                      const double* dy, double* dx, GradBuffer* dw, GradBuffer* du,
                      GradBuffer* dv, GradBuffer* ds2) {
    const std::size_t m = lin.weight.rows(), n = lin.weight.cols();
    const UnstructuredMask* mask = lin.mask ? &*lin.mask : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
        const double g = dy[i];
        const float* wrow = lin.weight.data().data() + i * n;
        double* dwrow = dw ? dw->values.data() + i * n : nullptr;
        if (mask) {
            const std::uint8_t* mrow = mask->bits.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                if (!mrow[j]) continue;
                if (dwrow) dwrow[j] += g * x[j];
                dx[j] += static_cast<double>(wrow[j]) * g;
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) {
                if (dwrow) dwrow[j] += g * x[j];
                dx[j] += static_cast<double>(wrow[j]) * g;
            }
        }
    }
    if (!lin.adapter) return;
    const SparseLowRankUpdate& ad = *lin.adapter;
    const std::size_t r = ad.rank();
    if (r > 0) {
        std::vector<double> ut_dy(r, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            const float* urow = ad.u.data().data() + i * r;
            for (std::size_t p = 0; p < r; ++p) ut_dy[p] += static_cast<double>(urow[p]) * dy[i];
        }
        for (std::size_t i = 0; i < m; ++i) {
            double* durow = du->values.data() + i * r;
            for (std::size_t p = 0; p < r; ++p) durow[p] += dy[i] * vx[p];
        }
        for (std::size_t p = 0; p < r; ++p) {
            const float* vrow = ad.v.data().data() + p * n;
            double* dvrow = dv->values.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                dvrow[j] += ut_dy[p] * x[j];
                dx[j] += static_cast<double>(vrow[j]) * ut_dy[p];
            }
        }
    }
    for (std::size_t idx = 0; idx < ad.support.indices.size(); ++idx) {
        const auto& [i, j] = ad.support.indices[idx];
        ds2->values[idx] += dy[i] * x[j];
        dx[j] += static_cast<double>(ad.s2_values[idx]) * dy[i];
    }
}

struct ProjCache {
    std::vector<double> out; // B*T*rows
    std::vector<double> vx;  // B*T*r
};

struct LayerCache {
    std::vector<double> h_in;
    std::vector<double> mean1, inv_std1, xhat1, a1;
    ProjCache q, k, v;
    std::vector<double> probs; // B*H*T*T
    std::vector<double> ctx, gated;
    ProjCache attn;
    std::vector<double> h_mid;
    std::vector<double> mean2, inv_std2, xhat2, a2;
    std::vector<double> ffn_pre, ffn_act;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    std::vector<double> h_final; // B*T*D
    std::vector<double> pooled;  // B*D
    std::vector<double> logits;  // B*C
};

void layer_norm_forward(const double* x, const std::vector<float>& gamma,
                        const std::vector<float>& beta, std::size_t count, std::size_t d,
                        std::vector<double>& mean, std::vector<double>& inv_std,
                        std::vector<double>& xhat, std::vector<double>& out) {
    mean.resize(count);
    inv_std.resize(count);
    xhat.resize(count * d);
    out.resize(count * d);
    for (std::size_t idx = 0; idx < count; ++idx) {
        const double* row = x + idx * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLnEps);
        mean[idx] = mu;
        inv_std[idx] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * is;
            xhat[idx * d + j] = xh;
            out[idx * d + j] = static_cast<double>(gamma[j]) * xh + beta[j];
        }
    }
}

// dx accumulated; dgamma/dbeta accumulated into grad buffers.
void layer_norm_backward(const double* dy, const double* xhat, const double* inv_std,
                         const std::vector<float>& gamma, std::size_t count, std::size_t d,
                         double* dx, GradBuffer& dgamma, GradBuffer& dbeta) {
    std::vector<double> g(d);
    for (std::size_t idx = 0; idx < count; ++idx) {
        const double* dyrow = dy + idx * d;
        const double* xhrow = xhat + idx * d;
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgamma.values[j] += dyrow[j] * xhrow[j];
            dbeta.values[j] += dyrow[j];
            g[j] = dyrow[j] * static_cast<double>(gamma[j]);
            sum_g += g[j];
            sum_gx += g[j] * xhrow[j];
        }
        const double mean_g = sum_g / static_cast<double>(d);
        const double mean_gx = sum_gx / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            dx[idx * d + j] += (g[j] - mean_g - xhrow[j] * mean_gx) * inv_std[idx];
        }
    }
}

struct Dims {
    std::size_t B, T, D, H, dh, A, F, C;
};

Dims dims_of(const ToyTransformer& m, const TokenBatch& tokens) {
    Dims d;
    d.B = tokens.batch;
    d.T = tokens.seq;
    d.D = m.cfg.d_model;
    d.H = m.cfg.n_heads;
    d.dh = m.head_dim;
    d.A = d.H * d.dh;
    d.F = m.cfg.d_ff;
    d.C = m.cfg.n_classes;
    return d;
}

void validate_batch(const ToyTransformer& m, const TokenBatch& tokens) {
    if (tokens.seq != static_cast<std::size_t>(m.cfg.seq_len)) {
        throw ShapeError("token batch seq length " + std::to_string(tokens.seq) +
                         " does not match model seq_len " + std::to_string(m.cfg.seq_len));
    }
    for (std::int32_t id : tokens.ids) {
        if (id < 0 || id >= m.cfg.vocab_size) {
            throw InputError("token id " + std::to_string(id) + " outside vocab of " +
                             std::to_string(m.cfg.vocab_size));
        }
    }
}

void run_forward(const ToyTransformer& m, const TokenBatch& tokens, ForwardCache& fc) {
    validate_batch(m, tokens);
    const Dims dm = dims_of(m, tokens);
    const std::size_t BT = dm.B * dm.T;

    std::vector<double> h(BT * dm.D);
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t t = 0; t < dm.T; ++t) {
            const std::int32_t id = tokens(b, t);
            double* row = h.data() + (b * dm.T + t) * dm.D;
            for (std::size_t j = 0; j < dm.D; ++j) {
                row[j] = static_cast<double>(m.tok_emb(id, j)) + m.pos_emb(t, j);
            }
        }
    }

    fc.layers.resize(m.layers.size());
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dm.dh));
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const EncoderLayer& layer = m.layers[l];
        LayerCache& lc = fc.layers[l];
        lc.h_in = h;

        layer_norm_forward(lc.h_in.data(), layer.ln1_gamma, layer.ln1_beta, BT, dm.D,
                           lc.mean1, lc.inv_std1, lc.xhat1, lc.a1);

        auto project = [&](const AdaptedLinear& lin, ProjCache& pc) {
            const std::size_t rows = lin.weight.rows();
            const std::size_t r = lin.adapter ? lin.adapter->rank() : 0;
            pc.out.resize(BT * rows);
            pc.vx.resize(BT * r);
            for (std::size_t idx = 0; idx < BT; ++idx) {
                adapted_apply(lin, lc.a1.data() + idx * dm.D, pc.out.data() + idx * rows,
                              r > 0 ? pc.vx.data() + idx * r : nullptr);
            }
        };
        project(layer.wq, lc.q);
        project(layer.wk, lc.k);
        project(layer.wv, lc.v);

        lc.probs.assign(dm.B * dm.H * dm.T * dm.T, 0.0);
        lc.ctx.assign(BT * dm.A, 0.0);
        std::vector<double> scores(dm.T);
        for (std::size_t b = 0; b < dm.B; ++b) {
            for (std::size_t head = 0; head < dm.H; ++head) {
                const std::size_t off = head * dm.dh;
                for (std::size_t t = 0; t < dm.T; ++t) {
                    const double* qrow = lc.q.out.data() + (b * dm.T + t) * dm.A + off;
                    double peak = -1e300;
                    for (std::size_t t2 = 0; t2 < dm.T; ++t2) {
                        const double* krow = lc.k.out.data() + (b * dm.T + t2) * dm.A + off;
                        double dot = 0.0;
                        for (std::size_t e = 0; e < dm.dh; ++e) dot += qrow[e] * krow[e];
                        scores[t2] = dot * inv_sqrt_dh;
                        peak = std::max(peak, scores[t2]);
                    }
                    double z = 0.0;
                    for (std::size_t t2 = 0; t2 < dm.T; ++t2) {
                        scores[t2] = std::exp(scores[t2] - peak);
                        z += scores[t2];
                    }
                    double* prow =
                        lc.probs.data() + ((b * dm.H + head) * dm.T + t) * dm.T;
                    double* crow = lc.ctx.data() + (b * dm.T + t) * dm.A + off;
                    for (std::size_t t2 = 0; t2 < dm.T; ++t2) {
                        const double p = scores[t2] / z;
                        prow[t2] = p;
                        const double* vrow = lc.v.out.data() + (b * dm.T + t2) * dm.A + off;
                        for (std::size_t e = 0; e < dm.dh; ++e) crow[e] += p * vrow[e];
                    }
                }
            }
        }

        lc.gated.resize(BT * dm.A);
        for (std::size_t idx = 0; idx < BT; ++idx) {
            for (std::size_t head = 0; head < dm.H; ++head) {
                const double gate = layer.gates[head];
                for (std::size_t e = 0; e < dm.dh; ++e) {
                    const std::size_t pos = idx * dm.A + head * dm.dh + e;
                    lc.gated[pos] = gate * lc.ctx[pos];
                }
            }
        }

        {
            const std::size_t r = layer.wo.adapter ? layer.wo.adapter->rank() : 0;
            lc.attn.out.resize(BT * dm.D);
            lc.attn.vx.resize(BT * r);
            for (std::size_t idx = 0; idx < BT; ++idx) {
                adapted_apply(layer.wo, lc.gated.data() + idx * dm.A,
                              lc.attn.out.data() + idx * dm.D,
                              r > 0 ? lc.attn.vx.data() + idx * r : nullptr);
            }
        }

        lc.h_mid.resize(BT * dm.D);
        for (std::size_t i = 0; i < lc.h_mid.size(); ++i) {
            lc.h_mid[i] = lc.h_in[i] + lc.attn.out[i];
        }

        layer_norm_forward(lc.h_mid.data(), layer.ln2_gamma, layer.ln2_beta, BT, dm.D,
                           lc.mean2, lc.inv_std2, lc.xhat2, lc.a2);

        lc.ffn_pre.resize(BT * dm.F);
        lc.ffn_act.resize(BT * dm.F);
        for (std::size_t idx = 0; idx < BT; ++idx) {
            const double* xrow = lc.a2.data() + idx * dm.D;
            for (std::size_t i = 0; i < dm.F; ++i) {
                const float* wrow = layer.ffn_w1.data().data() + i * dm.D;
                double acc = 0.0;
                for (std::size_t j = 0; j < dm.D; ++j) acc += static_cast<double>(wrow[j]) * xrow[j];
                lc.ffn_pre[idx * dm.F + i] = acc;
                lc.ffn_act[idx * dm.F + i] = gelu(acc);
            }
        }

        for (std::size_t idx = 0; idx < BT; ++idx) {
            const double* arow = lc.ffn_act.data() + idx * dm.F;
            double* hrow = h.data() + idx * dm.D;
            const double* mid = lc.h_mid.data() + idx * dm.D;
            for (std::size_t i = 0; i < dm.D; ++i) {
                const float* wrow = layer.ffn_w2.data().data() + i * dm.F;
                double acc = 0.0;
                for (std::size_t j = 0; j < dm.F; ++j) acc += static_cast<double>(wrow[j]) * arow[j];
                hrow[i] = mid[i] + acc;
            }
        }
    }

    fc.h_final = h;
    fc.pooled.assign(dm.B * dm.D, 0.0);
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t t = 0; t < dm.T; ++t) {
            const double* row = h.data() + (b * dm.T + t) * dm.D;
            for (std::size_t j = 0; j < dm.D; ++j) fc.pooled[b * dm.D + j] += row[j];
        }
        for (std::size_t j = 0; j < dm.D; ++j) {
            fc.pooled[b * dm.D + j] /= static_cast<double>(dm.T);
        }
    }

    fc.logits.assign(dm.B * dm.C, 0.0);
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t c = 0; c < dm.C; ++c) {
            const float* wrow = m.cls_weight.data().data() + c * dm.D;
            double acc = m.cls_bias[c];
            for (std::size_t j = 0; j < dm.D; ++j) {
                acc += static_cast<double>(wrow[j]) * fc.pooled[b * dm.D + j];
            }
            fc.logits[b * dm.C + c] = acc;
        }
    }
}

void validate_labels(const std::vector<int>& labels, std::size_t batch, int n_classes) {
    if (labels.size() != batch) {
        throw ShapeError("labels size " + std::to_string(labels.size()) + " vs batch " +
                         std::to_string(batch));
    }
    for (int label : labels) {
        if (label < 0 || label >= n_classes) {
            throw InputError("label " + std::to_string(label) + " outside " +
                             std::to_string(n_classes) + " classes");
        }
    }
}

// Mean CE over the batch; fills dlogits (softmax - onehot)/B when non-null.
double cross_entropy(const double* logits, const std::vector<int>& labels, std::size_t B,
                     std::size_t C, double* dlogits) {
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = logits + b * C;
        double peak = row[0];
        for (std::size_t c = 1; c < C; ++c) peak = std::max(peak, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - peak);
        const double log_z = std::log(z) + peak;
        total += log_z - row[labels[b]];
        if (dlogits) {
            for (std::size_t c = 0; c < C; ++c) {
                const double p = std::exp(row[c] - log_z);
                dlogits[b * C + c] = (p - (static_cast<int>(c) == labels[b] ? 1.0 : 0.0)) /
                                     static_cast<double>(B);
            }
        }
    }
    return total / static_cast<double>(B);
}

double gate_penalty(const ToyTransformer& m, double lambda_l1) {
    double sum = 0.0;
    for (const auto& layer : m.layers) {
        for (float g : layer.gates) sum += std::abs(static_cast<double>(g));
    }
    return lambda_l1 * sum;
}

} // namespace

DenseMatrix forward_logits(const ToyTransformer& model, const TokenBatch& tokens) {
    ForwardCache fc;
    run_forward(model, tokens, fc);
    DenseMatrix logits(tokens.batch, model.cfg.n_classes);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        logits.data()[i] = static_cast<float>(fc.logits[i]);
    }
    logits.check_finite("forward_logits");
    return logits;
}

double loss(const DenseMatrix& logits, const std::vector<int>& labels,
            const std::vector<std::vector<float>>& gates_per_layer, double lambda_l1) {
    validate_labels(labels, logits.rows(), static_cast<int>(logits.cols()));
    std::vector<double> lifted(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) lifted[i] = logits.data()[i];
    double value = cross_entropy(lifted.data(), labels, logits.rows(), logits.cols(), nullptr);
    double gate_sum = 0.0;
    for (const auto& gates : gates_per_layer) {
        for (float g : gates) gate_sum += std::abs(static_cast<double>(g));
    }
    return value + lambda_l1 * gate_sum;
}

double eval_loss(const ToyTransformer& model, const TokenBatch& tokens,
                 const std::vector<int>& labels, double lambda_l1) {
    validate_labels(labels, tokens.batch, model.cfg.n_classes);
    ForwardCache fc;
    run_forward(model, tokens, fc);
    return cross_entropy(fc.logits.data(), labels, tokens.batch, model.cfg.n_classes, nullptr) +
           gate_penalty(model, lambda_l1);
}

BackwardResult backward(const ToyTransformer& model, const TokenBatch& tokens,
                        const std::vector<int>& labels, double lambda_l1) {
    validate_labels(labels, tokens.batch, model.cfg.n_classes);
    ForwardCache fc;
    run_forward(model, tokens, fc);
    const Dims dm = dims_of(model, tokens);
    const std::size_t BT = dm.B * dm.T;

    BackwardResult result;
    for_each_param(model, [&](const std::string& name, ParamKind, const float*,
                              std::size_t size, std::vector<std::size_t> shape) {
        GradBuffer buf;
        buf.shape = std::move(shape);
        buf.values.assign(size, 0.0);
        result.grads.buffers.emplace(name, std::move(buf));
    });

    result.loss =
        cross_entropy(fc.logits.data(), labels, dm.B, dm.C, nullptr) +
        gate_penalty(model, lambda_l1);

    std::vector<double> dlogits(dm.B * dm.C);
    cross_entropy(fc.logits.data(), labels, dm.B, dm.C, dlogits.data());

    GradBuffer& d_cls_w = result.grads.at("classifier.weight");
    GradBuffer& d_cls_b = result.grads.at("classifier.bias");
    std::vector<double> dpooled(dm.B * dm.D, 0.0);
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t c = 0; c < dm.C; ++c) {
            const double g = dlogits[b * dm.C + c];
            d_cls_b.values[c] += g;
            const float* wrow = model.cls_weight.data().data() + c * dm.D;
            for (std::size_t j = 0; j < dm.D; ++j) {
                d_cls_w.values[c * dm.D + j] += g * fc.pooled[b * dm.D + j];
                dpooled[b * dm.D + j] += g * static_cast<double>(wrow[j]);
            }
        }
    }

    std::vector<double> dh(BT * dm.D);
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t t = 0; t < dm.T; ++t) {
            for (std::size_t j = 0; j < dm.D; ++j) {
                dh[(b * dm.T + t) * dm.D + j] = dpooled[b * dm.D + j] / static_cast<double>(dm.T);
            }
        }
    }

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dm.dh));
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const EncoderLayer& layer = model.layers[l];
        const LayerCache& lc = fc.layers[l];
        const std::string base = "layers." + std::to_string(l) + ".";

        // feed-forward block: h_out = h_mid + w2 gelu(w1 a2)
        GradBuffer& d_w1 = result.grads.at(base + "ffn.w1");
        GradBuffer& d_w2 = result.grads.at(base + "ffn.w2");
        std::vector<double> dffn_act(BT * dm.F, 0.0);
        for (std::size_t idx = 0; idx < BT; ++idx) {
            const double* dyrow = dh.data() + idx * dm.D;
            const double* arow = lc.ffn_act.data() + idx * dm.F;
            for (std::size_t i = 0; i < dm.D; ++i) {
                const double g = dyrow[i];
                const float* wrow = layer.ffn_w2.data().data() + i * dm.F;
                double* dwrow = d_w2.values.data() + i * dm.F;
                for (std::size_t j = 0; j < dm.F; ++j) {
                    dwrow[j] += g * arow[j];
                    dffn_act[idx * dm.F + j] += static_cast<double>(wrow[j]) * g;
                }
            }
        }
        std::vector<double> da2(BT * dm.D, 0.0);
        for (std::size_t idx = 0; idx < BT; ++idx) {
            const double* xrow = lc.a2.data() + idx * dm.D;
            for (std::size_t i = 0; i < dm.F; ++i) {
                const double g =
                    dffn_act[idx * dm.F + i] * gelu_grad(lc.ffn_pre[idx * dm.F + i]);
                const float* wrow = layer.ffn_w1.data().data() + i * dm.D;
                double* dwrow = d_w1.values.data() + i * dm.D;
                for (std::size_t j = 0; j < dm.D; ++j) {
                    dwrow[j] += g * xrow[j];
                    da2[idx * dm.D + j] += static_cast<double>(wrow[j]) * g;
                }
            }
        }

        // dh currently holds dL/dh_out; residual passes it into dh_mid
        std::vector<double> dh_mid = dh;
        layer_norm_backward(da2.data(), lc.xhat2.data(), lc.inv_std2.data(), layer.ln2_gamma,
                            BT, dm.D, dh_mid.data(), result.grads.at(base + "ln2.gamma"),
                            result.grads.at(base + "ln2.beta"));

        // attention block: h_mid = h_in + wo(gated)
        std::vector<double> dgated(BT * dm.A, 0.0);
        {
            const bool has_lr = layer.wo.adapter && layer.wo.adapter->rank() > 0;
            GradBuffer* du = has_lr ? &result.grads.at(base + "attn.o.adapter.u") : nullptr;
            GradBuffer* dv = has_lr ? &result.grads.at(base + "attn.o.adapter.v") : nullptr;
            GradBuffer* ds2 = layer.wo.adapter && !layer.wo.adapter->s2_values.empty()
                                  ? &result.grads.at(base + "attn.o.adapter.s2")
                                  : nullptr;
            GradBuffer& dw = result.grads.at(base + "attn.o.weight");
            const std::size_t r = layer.wo.adapter ? layer.wo.adapter->rank() : 0;
            for (std::size_t idx = 0; idx < BT; ++idx) {
                adapted_backward(layer.wo, lc.gated.data() + idx * dm.A,
                                 r > 0 ? lc.attn.vx.data() + idx * r : nullptr,
                                 dh_mid.data() + idx * dm.D, dgated.data() + idx * dm.A, &dw,
                                 du, dv, ds2);
            }
        }

        GradBuffer& dgates = result.grads.at(base + "gates");
        std::vector<double> dctx(BT * dm.A, 0.0);
        for (std::size_t idx = 0; idx < BT; ++idx) {
            for (std::size_t head = 0; head < dm.H; ++head) {
                const double gate = layer.gates[head];
                for (std::size_t e = 0; e < dm.dh; ++e) {
                    const std::size_t pos = idx * dm.A + head * dm.dh + e;
                    dgates.values[head] += dgated[pos] * lc.ctx[pos];
                    dctx[pos] = gate * dgated[pos];
                }
            }
        }

        std::vector<double> dq(BT * dm.A, 0.0), dk(BT * dm.A, 0.0), dv_attn(BT * dm.A, 0.0);
        std::vector<double> dp(dm.T), dscore(dm.T);
        for (std::size_t b = 0; b < dm.B; ++b) {
            for (std::size_t head = 0; head < dm.H; ++head) {
                const std::size_t off = head * dm.dh;
                for (std::size_t t = 0; t < dm.T; ++t) {
                    const double* prow =
                        lc.probs.data() + ((b * dm.H + head) * dm.T + t) * dm.T;
                    const double* dcrow = dctx.data() + (b * dm.T + t) * dm.A + off;
                    double dot_pp = 0.0;
                    for (std::size_t t2 = 0; t2 < dm.T; ++t2) {
                        const double* vrow = lc.v.out.data() + (b * dm.T + t2) * dm.A + off;
                        double acc = 0.0;
                        for (std::size_t e = 0; e < dm.dh; ++e) acc += dcrow[e] * vrow[e];
                        dp[t2] = acc;
                        dot_pp += acc * prow[t2];
                        double* dvrow = dv_attn.data() + (b * dm.T + t2) * dm.A + off;
                        for (std::size_t e = 0; e < dm.dh; ++e) dvrow[e] += prow[t2] * dcrow[e];
                    }
                    for (std::size_t t2 = 0; t2 < dm.T; ++t2) {
                        dscore[t2] = prow[t2] * (dp[t2] - dot_pp) * inv_sqrt_dh;
                    }
                    const double* qrow = lc.q.out.data() + (b * dm.T + t) * dm.A + off;
                    double* dqrow = dq.data() + (b * dm.T + t) * dm.A + off;
                    for (std::size_t t2 = 0; t2 < dm.T; ++t2) {
                        const double* krow = lc.k.out.data() + (b * dm.T + t2) * dm.A + off;
                        double* dkrow = dk.data() + (b * dm.T + t2) * dm.A + off;
                        for (std::size_t e = 0; e < dm.dh; ++e) {
                            dqrow[e] += dscore[t2] * krow[e];
                            dkrow[e] += dscore[t2] * qrow[e];
                        }
                    }
                }
            }
        }

        std::vector<double> da1(BT * dm.D, 0.0);
        auto backprop_proj = [&](const AdaptedLinear& lin, const char* tag, const ProjCache& pc,
                                 const std::vector<double>& dy) {
            const std::string stem = base + "attn." + tag + ".";
            GradBuffer& dw = result.grads.at(stem + "weight");
            const bool has_lr = lin.adapter && lin.adapter->rank() > 0;
            GradBuffer* du = has_lr ? &result.grads.at(stem + "adapter.u") : nullptr;
            GradBuffer* dvb = has_lr ? &result.grads.at(stem + "adapter.v") : nullptr;
            GradBuffer* ds2 = lin.adapter && !lin.adapter->s2_values.empty()
                                  ? &result.grads.at(stem + "adapter.s2")
                                  : nullptr;
            const std::size_t rows = lin.weight.rows();
            const std::size_t r = lin.adapter ? lin.adapter->rank() : 0;
            for (std::size_t idx = 0; idx < BT; ++idx) {
                adapted_backward(lin, lc.a1.data() + idx * dm.D,
                                 r > 0 ? pc.vx.data() + idx * r : nullptr,
                                 dy.data() + idx * rows, da1.data() + idx * dm.D, &dw, du, dvb,
                                 ds2);
            }
        };
        backprop_proj(layer.wq, "q", lc.q, dq);
        backprop_proj(layer.wk, "k", lc.k, dk);
        backprop_proj(layer.wv, "v", lc.v, dv_attn);

        // dh_mid also flows to h_in through the residual
        layer_norm_backward(da1.data(), lc.xhat1.data(), lc.inv_std1.data(), layer.ln1_gamma,
                            BT, dm.D, dh_mid.data(), result.grads.at(base + "ln1.gamma"),
                            result.grads.at(base + "ln1.beta"));
        dh = std::move(dh_mid);
    }

    GradBuffer& d_tok = result.grads.at("tok_emb");
    GradBuffer& d_pos = result.grads.at("pos_emb");
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t t = 0; t < dm.T; ++t) {
            const std::int32_t id = tokens(b, t);
            const double* row = dh.data() + (b * dm.T + t) * dm.D;
            for (std::size_t j = 0; j < dm.D; ++j) {
                d_tok.values[static_cast<std::size_t>(id) * dm.D + j] += row[j];
                d_pos.values[t * dm.D + j] += row[j];
            }
        }
    }

    // l1 penalty on gates; subgradient at 0 is 0
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        GradBuffer& dgates = result.grads.at("layers." + std::to_string(l) + ".gates");
        for (std::size_t head = 0; head < model.layers[l].gates.size(); ++head) {
            const float g = model.layers[l].gates[head];
            if (g > 0.0f) dgates.values[head] += lambda_l1;
            else if (g < 0.0f) dgates.values[head] -= lambda_l1;
        }
    }

    result.grads.check_finite();
    return result;
}

double eval_accuracy(const ToyTransformer& model, const TokenBatch& tokens,
                     const std::vector<int>& labels) {
    validate_labels(labels, tokens.batch, model.cfg.n_classes);
    DenseMatrix logits = forward_logits(model, tokens);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < tokens.batch; ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(b, c) > logits(b, best)) best = c;
        }
        correct += (static_cast<int>(best) == labels[b]);
    }
    return tokens.batch == 0 ? 0.0 : static_cast<double>(correct) / tokens.batch;
}

} // namespace dsee
