#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dsee/model.hpp"
#include "support.hpp"

using dsee::DenseMatrix;
using dsee::Rng;
using dsee::TokenBatch;
using dsee::ToyTransformer;
using dsee::ToyTransformerConfig;

namespace {

constexpr double kLnEps = 1e-5;

ToyTransformerConfig tiny_config() {
    ToyTransformerConfig cfg;
    cfg.vocab_size = 11;
    cfg.seq_len = 4;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.n_layers = 2;
    cfg.n_classes = 3;
    return cfg;
}

TokenBatch tiny_batch(const ToyTransformerConfig& cfg, Rng& rng, std::size_t batch) {
    TokenBatch tokens;
    tokens.batch = batch;
    tokens.seq = cfg.seq_len;
    for (std::size_t i = 0; i < batch * tokens.seq; ++i) {
        tokens.ids.push_back(static_cast<std::int32_t>(rng.bounded(cfg.vocab_size)));
    }
    return tokens;
}

std::vector<int> tiny_labels(const ToyTransformerConfig& cfg, Rng& rng, std::size_t batch) {
    std::vector<int> labels(batch);
    for (auto& l : labels) l = static_cast<int>(rng.bounded(cfg.n_classes));
    return labels;
}

void attach_adapters(ToyTransformer& model, std::size_t r, std::size_t card, Rng& rng) {
    for (auto& layer : model.layers) {
        for (dsee::AdaptedLinear* lin : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
            lin->adapter =
                dsee::init_update(lin->weight, r, card, dsee::SupportMethod::Magnitude, rng);
        }
    }
}

void randomize_adapters(ToyTransformer& model, Rng& rng) {
    for (auto& layer : model.layers) {
        for (dsee::AdaptedLinear* lin : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
            if (!lin->adapter) continue;
            for (auto& u : lin->adapter->u.data()) u = static_cast<float>(rng.normal(0.0, 0.05));
            for (auto& s : lin->adapter->s2_values) s = static_cast<float>(rng.normal(0.0, 0.05));
        }
    }
}

// Straight-line reference forward pass, written independently of the library
// engine (per-vector arithmetic, dense effective weights).
std::vector<double> reference_logits(const ToyTransformer& m, const TokenBatch& tokens) {
    const std::size_t T = tokens.seq, D = m.cfg.d_model, H = m.cfg.n_heads;
    const std::size_t dh = m.head_dim, A = H * dh, F = m.cfg.d_ff, C = m.cfg.n_classes;

    auto layer_norm = [&](const std::vector<double>& x, const std::vector<float>& gamma,
                          const std::vector<float>& beta) {
        double mu = 0.0;
        for (double v : x) mu += v;
        mu /= static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x) var += (v - mu) * (v - mu);
        var /= static_cast<double>(x.size());
        std::vector<double> out(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
            out[j] = gamma[j] * (x[j] - mu) / std::sqrt(var + kLnEps) + beta[j];
        }
        return out;
    };
    auto effective = [&](const dsee::AdaptedLinear& lin) {
        std::vector<std::vector<double>> w(lin.weight.rows(),
                                           std::vector<double>(lin.weight.cols(), 0.0));
        for (std::size_t i = 0; i < lin.weight.rows(); ++i) {
            for (std::size_t j = 0; j < lin.weight.cols(); ++j) {
                if (!lin.mask || lin.mask->kept(i, j)) w[i][j] = lin.weight(i, j);
            }
        }
        if (lin.adapter) {
            const auto& ad = *lin.adapter;
            for (std::size_t i = 0; i < lin.weight.rows(); ++i) {
                for (std::size_t j = 0; j < lin.weight.cols(); ++j) {
                    for (std::size_t p = 0; p < ad.rank(); ++p) {
                        w[i][j] += static_cast<double>(ad.u(i, p)) * ad.v(p, j);
                    }
                }
            }
            for (std::size_t k = 0; k < ad.support.indices.size(); ++k) {
                w[ad.support.indices[k].first][ad.support.indices[k].second] +=
                    ad.s2_values[k];
            }
        }
        return w;
    };
    auto apply = [](const std::vector<std::vector<double>>& w, const std::vector<double>& x) {
        std::vector<double> y(w.size(), 0.0);
        for (std::size_t i = 0; i < w.size(); ++i) {
            for (std::size_t j = 0; j < x.size(); ++j) y[i] += w[i][j] * x[j];
        }
        return y;
    };
    auto gelu = [](double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); };

    std::vector<double> logits;
    for (std::size_t b = 0; b < tokens.batch; ++b) {
        std::vector<std::vector<double>> h(T, std::vector<double>(D));
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < D; ++j) {
                h[t][j] = static_cast<double>(m.tok_emb(tokens(b, t), j)) + m.pos_emb(t, j);
            }
        }
        for (const auto& layer : m.layers) {
            const auto wq = effective(layer.wq), wk = effective(layer.wk),
                       wv = effective(layer.wv), wo = effective(layer.wo);
            std::vector<std::vector<double>> a1(T), q(T), k(T), v(T);
            for (std::size_t t = 0; t < T; ++t) {
                a1[t] = layer_norm(h[t], layer.ln1_gamma, layer.ln1_beta);
                q[t] = apply(wq, a1[t]);
                k[t] = apply(wk, a1[t]);
                v[t] = apply(wv, a1[t]);
            }
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> gated(A, 0.0);
                for (std::size_t head = 0; head < H; ++head) {
                    std::vector<double> scores(T);
                    for (std::size_t t2 = 0; t2 < T; ++t2) {
                        double dot = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dot += q[t][head * dh + e] * k[t2][head * dh + e];
                        }
                        scores[t2] = dot / std::sqrt(static_cast<double>(dh));
                    }
                    const double peak = *std::max_element(scores.begin(), scores.end());
                    double z = 0.0;
                    for (double& s : scores) {
                        s = std::exp(s - peak);
                        z += s;
                    }
                    for (std::size_t e = 0; e < dh; ++e) {
                        double ctx = 0.0;
                        for (std::size_t t2 = 0; t2 < T; ++t2) {
                            ctx += scores[t2] / z * v[t2][head * dh + e];
                        }
                        gated[head * dh + e] = layer.gates[head] * ctx;
                    }
                }
                const std::vector<double> attn = apply(wo, gated);
                for (std::size_t j = 0; j < D; ++j) h[t][j] += attn[j];
            }
            for (std::size_t t = 0; t < T; ++t) {
                const auto a2 = layer_norm(h[t], layer.ln2_gamma, layer.ln2_beta);
                std::vector<double> mid(F, 0.0);
                for (std::size_t i = 0; i < F; ++i) {
                    for (std::size_t j = 0; j < D; ++j) mid[i] += layer.ffn_w1(i, j) * a2[j];
                    mid[i] = gelu(mid[i]);
                }
                for (std::size_t j = 0; j < D; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < F; ++i) acc += layer.ffn_w2(j, i) * mid[i];
                    h[t][j] += acc;
                }
            }
        }
        std::vector<double> pooled(D, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < D; ++j) pooled[j] += h[t][j] / static_cast<double>(T);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double acc = m.cls_bias[c];
            for (std::size_t j = 0; j < D; ++j) acc += m.cls_weight(c, j) * pooled[j];
            logits.push_back(acc);
        }
    }
    return logits;
}

// Same reference with the attention blocks removed entirely (residual + FFN
// path only), for the gate-annihilation check.
std::vector<double> gate_free_logits(const ToyTransformer& m, const TokenBatch& tokens) {
    const std::size_t T = tokens.seq, D = m.cfg.d_model, F = m.cfg.d_ff, C = m.cfg.n_classes;
    auto layer_norm = [&](const std::vector<double>& x, const std::vector<float>& gamma,
                          const std::vector<float>& beta) {
        double mu = 0.0;
        for (double v : x) mu += v;
        mu /= static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x) var += (v - mu) * (v - mu);
        var /= static_cast<double>(x.size());
        std::vector<double> out(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) {
            out[j] = gamma[j] * (x[j] - mu) / std::sqrt(var + kLnEps) + beta[j];
        }
        return out;
    };
    auto gelu = [](double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); };
    std::vector<double> logits;
    for (std::size_t b = 0; b < tokens.batch; ++b) {
        std::vector<std::vector<double>> h(T, std::vector<double>(D));
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < D; ++j) {
                h[t][j] = static_cast<double>(m.tok_emb(tokens(b, t), j)) + m.pos_emb(t, j);
            }
        }
        for (const auto& layer : m.layers) {
            for (std::size_t t = 0; t < T; ++t) {
                const auto a2 = layer_norm(h[t], layer.ln2_gamma, layer.ln2_beta);
                std::vector<double> mid(F, 0.0);
                for (std::size_t i = 0; i < F; ++i) {
                    for (std::size_t j = 0; j < D; ++j) mid[i] += layer.ffn_w1(i, j) * a2[j];
                    mid[i] = gelu(mid[i]);
                }
                for (std::size_t j = 0; j < D; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < F; ++i) acc += layer.ffn_w2(j, i) * mid[i];
                    h[t][j] += acc;
                }
            }
        }
        std::vector<double> pooled(D, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < D; ++j) pooled[j] += h[t][j] / static_cast<double>(T);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double acc = m.cls_bias[c];
            for (std::size_t j = 0; j < D; ++j) acc += m.cls_weight(c, j) * pooled[j];
            logits.push_back(acc);
        }
    }
    return logits;
}

} // namespace

TEST_SUITE("forward_logits") {
    TEST_CASE("matches the straight-line reference") {
        Rng rng(301);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        attach_adapters(model, 2, 3, rng);
        randomize_adapters(model, rng);
        model.layers[0].gates = {0.8f, 1.3f};
        model.layers[1].gates = {-0.4f, 1.0f};
        const TokenBatch tokens = tiny_batch(model.cfg, rng, 3);
        const DenseMatrix logits = dsee::forward_logits(model, tokens);
        const auto expected = reference_logits(model, tokens);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            CHECK(std::abs(logits.data()[i] - expected[i]) <= 1e-5);
        }
    }

    TEST_CASE("zero gates reduce to the residual-ffn path") {
        Rng rng(303);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        for (auto& layer : model.layers) {
            std::fill(layer.gates.begin(), layer.gates.end(), 0.0f);
        }
        const TokenBatch tokens = tiny_batch(model.cfg, rng, 2);
        const DenseMatrix logits = dsee::forward_logits(model, tokens);
        const auto expected = gate_free_logits(model, tokens);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            CHECK(std::abs(logits.data()[i] - expected[i]) <= 1e-7);
        }
    }

    TEST_CASE("fresh adapters leave logits bit-for-bit unchanged") {
        Rng rng(305);
        const ToyTransformer plain = ToyTransformer::init(tiny_config(), rng);
        ToyTransformer adapted = plain;
        Rng adapter_rng(7);
        attach_adapters(adapted, 2, 4, adapter_rng);
        const TokenBatch tokens = tiny_batch(plain.cfg, rng, 4);
        CHECK(dsee::forward_logits(plain, tokens) == dsee::forward_logits(adapted, tokens));
    }

    TEST_CASE("out-of-range tokens rejected") {
        Rng rng(307);
        const ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        TokenBatch tokens = tiny_batch(model.cfg, rng, 1);
        tokens.ids[0] = model.cfg.vocab_size;
        CHECK_THROWS_AS(dsee::forward_logits(model, tokens), dsee::InputError);
    }
}

TEST_SUITE("loss") {
    TEST_CASE("lambda zero is plain cross-entropy") {
        const DenseMatrix logits = DenseMatrix::from_rows({{2.0f, 0.0f, -1.0f}});
        const std::vector<int> labels = {0};
        const double ce = dsee::loss(logits, labels, {{1.0f, 1.0f}}, 0.0);
        const double z = std::exp(2.0) + std::exp(0.0) + std::exp(-1.0);
        CHECK(ce == doctest::Approx(std::log(z) - 2.0).epsilon(1e-9));
    }

    TEST_CASE("uniform logits over k classes give ln k") {
        const DenseMatrix logits = DenseMatrix::from_rows({{0.5f, 0.5f, 0.5f, 0.5f, 0.5f}});
        CHECK(dsee::loss(logits, {3}, {}, 0.0) == doctest::Approx(std::log(5.0)).epsilon(1e-9));
    }

    TEST_CASE("gate penalty hand sum") {
        const DenseMatrix logits = DenseMatrix::from_rows({{1.0f, 1.0f}});
        const std::vector<std::vector<float>> gates = {{1, 1, 1, 1}, {1, 1, 1, 1}};
        const double with = dsee::loss(logits, {0}, gates, 1e-4);
        const double without = dsee::loss(logits, {0}, gates, 0.0);
        CHECK(with - without == doctest::Approx(8e-4).epsilon(1e-9));
    }

    TEST_CASE("bad labels rejected") {
        const DenseMatrix logits = DenseMatrix::from_rows({{1.0f, 1.0f}});
        CHECK_THROWS_AS(dsee::loss(logits, {2}, {}, 0.0), dsee::InputError);
        CHECK_THROWS_AS(dsee::loss(logits, {0, 1}, {}, 0.0), dsee::ShapeError);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("finite differences across every parameter group, three seeds") {
        for (std::uint64_t seed : {401ULL, 402ULL, 403ULL}) {
            Rng rng(seed);
            ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
            attach_adapters(model, 2, 3, rng);
            randomize_adapters(model, rng);
            model.layers[0].gates = {0.7f, 1.2f};
            model.layers[1].gates = {1.0f, -0.6f};
            // a mask on one projection exercises the masked-gradient path
            dsee::UnstructuredMask mask = dsee::UnstructuredMask::all_ones(8, 8);
            for (std::size_t i = 0; i < mask.bits.size(); i += 3) mask.bits[i] = 0;
            model.layers[0].wv.mask = mask;

            const TokenBatch tokens = tiny_batch(model.cfg, rng, 2);
            const auto labels = tiny_labels(model.cfg, rng, 2);
            const auto outcome =
                testsupport::finite_difference_check(model, tokens, labels, 1e-4);
            INFO("worst param: " << outcome.worst.param << "[" << outcome.worst.index
                                 << "] analytic=" << outcome.worst.analytic
                                 << " numeric=" << outcome.worst.numeric);
            CHECK(outcome.ok);
        }
    }

    TEST_CASE("unused embedding rows receive zero gradient") {
        Rng rng(411);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        TokenBatch tokens;
        tokens.batch = 1;
        tokens.seq = 4;
        tokens.ids = {1, 2, 1, 2};
        const auto result = dsee::backward(model, tokens, {0}, 0.0);
        const dsee::GradBuffer& grad = result.grads.at("tok_emb");
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(grad.values[0 * 8 + j] == 0.0);  // token 0 unused
            CHECK(grad.values[5 * 8 + j] == 0.0);  // token 5 unused
        }
    }

    TEST_CASE("gate gradients carry the l1 term") {
        Rng rng(413);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        model.layers[0].gates = {1.0f, -1.0f};
        const TokenBatch tokens = tiny_batch(model.cfg, rng, 2);
        const auto labels = tiny_labels(model.cfg, rng, 2);
        const double lambda = 1e-4;
        const auto with = dsee::backward(model, tokens, labels, lambda);
        const auto without = dsee::backward(model, tokens, labels, 0.0);
        const auto& g1 = with.grads.at("layers.0.gates").values;
        const auto& g0 = without.grads.at("layers.0.gates").values;
        CHECK(g1[0] - g0[0] == doctest::Approx(lambda).epsilon(1e-12));
        CHECK(g1[1] - g0[1] == doctest::Approx(-lambda).epsilon(1e-12));

        // subgradient at zero is zero
        model.layers[1].gates = {0.0f, 0.0f};
        const auto at_zero = dsee::backward(model, tokens, labels, lambda);
        const auto no_pen = dsee::backward(model, tokens, labels, 0.0);
        CHECK(at_zero.grads.at("layers.1.gates").values[0] ==
              no_pen.grads.at("layers.1.gates").values[0]);
    }

    TEST_CASE("s2 gradients exist only for supported entries") {
        Rng rng(417);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        attach_adapters(model, 2, 5, rng);
        const TokenBatch tokens = tiny_batch(model.cfg, rng, 2);
        const auto labels = tiny_labels(model.cfg, rng, 2);
        const auto result = dsee::backward(model, tokens, labels, 0.0);
        const auto& buf = result.grads.at("layers.0.attn.q.adapter.s2");
        CHECK(buf.values.size() == 5);
        CHECK(buf.shape == std::vector<std::size_t>{5});
    }

    TEST_CASE("loss agrees with the standalone loss op and is deterministic") {
        Rng rng(419);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        const TokenBatch tokens = tiny_batch(model.cfg, rng, 3);
        const auto labels = tiny_labels(model.cfg, rng, 3);
        const auto r1 = dsee::backward(model, tokens, labels, 1e-4);
        const auto r2 = dsee::backward(model, tokens, labels, 1e-4);
        CHECK(r1.loss == r2.loss);
        CHECK(r1.loss == dsee::eval_loss(model, tokens, labels, 1e-4));
        std::vector<std::vector<float>> gates;
        for (const auto& layer : model.layers) gates.push_back(layer.gates);
        const double via_op = dsee::loss(dsee::forward_logits(model, tokens), labels, gates, 1e-4);
        CHECK(std::abs(via_op - r1.loss) <= 1e-6);
    }
}

TEST_SUITE("model_misc") {
    TEST_CASE("config validation") {
        ToyTransformerConfig bad = tiny_config();
        bad.n_heads = 3; // 8 % 3 != 0
        CHECK_THROWS_AS(bad.validate(), dsee::ParameterError);
        bad = tiny_config();
        bad.vocab_size = 0;
        CHECK_THROWS_AS(bad.validate(), dsee::ParameterError);
    }

    TEST_CASE("eval accuracy counts argmax hits") {
        Rng rng(431);
        ToyTransformer model = ToyTransformer::init(tiny_config(), rng);
        const TokenBatch tokens = tiny_batch(model.cfg, rng, 8);
        const DenseMatrix logits = dsee::forward_logits(model, tokens);
        std::vector<int> best(8, 0);
        for (std::size_t b = 0; b < 8; ++b) {
            for (std::size_t c = 1; c < logits.cols(); ++c) {
                if (logits(b, c) > logits(b, best[b])) best[b] = static_cast<int>(c);
            }
        }
        CHECK(dsee::eval_accuracy(model, tokens, best) == 1.0);
        std::vector<int> wrong = best;
        wrong[0] = (best[0] + 1) % 3;
        CHECK(dsee::eval_accuracy(model, tokens, wrong) == doctest::Approx(7.0 / 8.0));
    }
}
