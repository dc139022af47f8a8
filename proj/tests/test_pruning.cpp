#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dsee/accounting.hpp"
#include "dsee/pruning.hpp"
#include "support.hpp"

using dsee::DenseMatrix;
using dsee::NamedMatrix;
using dsee::Rng;
using dsee::ToyTransformer;
using dsee::UnstructuredMask;

namespace {

dsee::ToyTransformerConfig small_config() {
    dsee::ToyTransformerConfig cfg;
    cfg.vocab_size = 12;
    cfg.seq_len = 6;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.d_ff = 24;
    cfg.n_layers = 2;
    cfg.n_classes = 4;
    return cfg;
}

dsee::TokenBatch small_batch(const dsee::ToyTransformerConfig& cfg, Rng& rng, std::size_t b) {
    dsee::TokenBatch tokens;
    tokens.batch = b;
    tokens.seq = cfg.seq_len;
    for (std::size_t i = 0; i < b * tokens.seq; ++i) {
        tokens.ids.push_back(static_cast<std::int32_t>(rng.bounded(cfg.vocab_size)));
    }
    return tokens;
}

} // namespace

TEST_SUITE("magnitude_mask") {
    TEST_CASE("sparsity zero keeps everything") {
        Rng rng(1);
        const DenseMatrix a = dsee::gaussian_matrix(4, 4, rng);
        const auto masks = dsee::magnitude_mask({{"a", &a}}, 0.0);
        CHECK(masks[0].kept_count() == 16);
    }

    TEST_CASE("single matrix hand case") {
        const DenseMatrix a = DenseMatrix::from_rows({{1, -4}, {3, 2}});
        const auto masks = dsee::magnitude_mask({{"a", &a}}, 0.5);
        CHECK(masks[0].kept(0, 1));
        CHECK(masks[0].kept(1, 0));
        CHECK(!masks[0].kept(0, 0));
        CHECK(!masks[0].kept(1, 1));
    }

    TEST_CASE("global thresholding differs from per-matrix") {
        // one matrix all-large, one all-small: the global rule masks only the
        // small matrix
        DenseMatrix big(2, 2), small(2, 2);
        for (auto& v : big.data()) v = 10.0f;
        for (auto& v : small.data()) v = 0.1f;
        const auto masks = dsee::magnitude_mask({{"big", &big}, {"small", &small}}, 0.5);
        CHECK(masks[0].kept_count() == 4);
        CHECK(masks[1].kept_count() == 0);
    }

    TEST_CASE("exact count and global threshold across random instances") {
        Rng rng(7);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<DenseMatrix> matrices;
            std::vector<NamedMatrix> named;
            const std::size_t count = 1 + rng.bounded(4);
            matrices.reserve(count);
            std::size_t total = 0;
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t m = 2 + rng.bounded(6);
                const std::size_t n = 2 + rng.bounded(6);
                matrices.push_back(dsee::gaussian_matrix(m, n, rng));
                total += m * n;
            }
            for (std::size_t i = 0; i < count; ++i) {
                named.push_back({"m" + std::to_string(i), &matrices[i]});
            }
            const double sparsity = rng.uniform01() * 0.99;
            const auto masks = dsee::magnitude_mask(named, sparsity);
            std::size_t masked = 0;
            double max_masked = -1.0, min_kept = 1e300;
            for (std::size_t i = 0; i < count; ++i) {
                for (std::size_t row = 0; row < matrices[i].rows(); ++row) {
                    for (std::size_t col = 0; col < matrices[i].cols(); ++col) {
                        const double mag = std::abs(matrices[i](row, col));
                        if (masks[i].kept(row, col)) {
                            min_kept = std::min(min_kept, mag);
                        } else {
                            ++masked;
                            max_masked = std::max(max_masked, mag);
                        }
                    }
                }
            }
            CHECK(masked == static_cast<std::size_t>(std::floor(sparsity * total)));
            if (max_masked >= 0.0 && min_kept < 1e300) {
                CHECK(max_masked <= min_kept);
            }
        }
    }

    TEST_CASE("sparsity one rejected") {
        const DenseMatrix a = DenseMatrix(2, 2);
        CHECK_THROWS_AS(dsee::magnitude_mask({{"a", &a}}, 1.0), dsee::ParameterError);
    }
}

TEST_SUITE("head_importance") {
    TEST_CASE("ascending magnitude ordering") {
        const auto rankings = dsee::head_importance({{0.9f, 0.1f, 0.5f, 0.5f}});
        CHECK(rankings[0] == std::vector<std::size_t>{1, 2, 3, 0});
    }

    TEST_CASE("equal gates rank by index") {
        const auto rankings = dsee::head_importance({{0.3f, 0.3f, 0.3f}});
        CHECK(rankings[0] == std::vector<std::size_t>{0, 1, 2});
    }

    TEST_CASE("negative gates rank by magnitude") {
        const auto rankings = dsee::head_importance({{-0.05f, 0.2f}});
        CHECK(rankings[0] == std::vector<std::size_t>{0, 1});
    }
}

TEST_SUITE("shrink_update") {
    TEST_CASE("keeping everything is the identity") {
        Rng rng(11);
        const DenseMatrix w = dsee::gaussian_matrix(6, 8, rng);
        dsee::SparseLowRankUpdate upd =
            dsee::init_update(w, 2, 5, dsee::SupportMethod::Random, rng);
        for (auto& u : upd.u.data()) u = static_cast<float>(rng.normal());
        for (auto& s : upd.s2_values) s = static_cast<float>(rng.normal());
        std::vector<std::size_t> rows = {0, 1, 2, 3, 4, 5};
        std::vector<std::size_t> cols = {0, 1, 2, 3, 4, 5, 6, 7};
        CHECK(dsee::shrink_update(upd, rows, cols) == upd);
    }

    TEST_CASE("dropping a column rebases higher indices") {
        dsee::SparseLowRankUpdate upd;
        upd.host_rows = 2;
        upd.host_cols = 4;
        upd.u = DenseMatrix(2, 1);
        upd.v = DenseMatrix::from_rows({{1, 2, 3, 4}});
        upd.support.host_rows = 2;
        upd.support.host_cols = 4;
        upd.support.indices = {{0, 1}, {0, 3}, {1, 2}};
        upd.s2_values = {10.0f, 20.0f, 30.0f};
        const auto shrunk = dsee::shrink_update(upd, {0, 1}, {0, 2, 3}); // drop col 1
        CHECK(shrunk.v == DenseMatrix::from_rows({{1, 3, 4}}));
        const std::vector<std::pair<std::uint32_t, std::uint32_t>> expected = {{0, 2}, {1, 1}};
        CHECK(shrunk.support.indices == expected);
        CHECK(shrunk.s2_values == std::vector<float>{20.0f, 30.0f});
    }

    TEST_CASE("slice-then-merge equals merge-then-slice") {
        Rng rng(13);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t m = 5 + rng.bounded(6);
            const std::size_t n = 5 + rng.bounded(6);
            const DenseMatrix w = dsee::gaussian_matrix(m, n, rng);
            dsee::SparseLowRankUpdate upd =
                dsee::init_update(w, 2, m, dsee::SupportMethod::Random, rng);
            for (auto& u : upd.u.data()) u = static_cast<float>(rng.normal());
            for (auto& s : upd.s2_values) s = static_cast<float>(rng.normal());

            std::vector<std::size_t> rows, cols;
            for (std::size_t i = 0; i < m; ++i) {
                if (rng.uniform01() < 0.7 || rows.empty()) rows.push_back(i);
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (rng.uniform01() < 0.7 || cols.empty()) cols.push_back(j);
            }
            const DenseMatrix full_delta = upd.delta_dense();
            const auto shrunk = dsee::shrink_update(upd, rows, cols);
            const DenseMatrix small_delta = shrunk.delta_dense();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                for (std::size_t j = 0; j < cols.size(); ++j) {
                    CHECK(std::abs(small_delta(i, j) - full_delta(rows[i], cols[j])) <= 1e-6);
                }
            }
        }
    }

    TEST_CASE("empty kept set rejected") {
        Rng rng(17);
        const DenseMatrix w = dsee::gaussian_matrix(4, 4, rng);
        const auto upd = dsee::init_update(w, 1, 2, dsee::SupportMethod::Random, rng);
        CHECK_THROWS_AS(dsee::shrink_update(upd, {}, {0, 1, 2, 3}), dsee::ParameterError);
        CHECK_THROWS_AS(dsee::shrink_update(upd, {0, 5}, {0}), dsee::ParameterError);
    }
}

TEST_SUITE("prune_heads") {
    TEST_CASE("zero ratio leaves the model untouched and is idempotent") {
        Rng rng(19);
        ToyTransformer model = ToyTransformer::init(small_config(), rng);
        const ToyTransformer same = dsee::prune_heads(model, 0.0);
        CHECK(same == model);
        const ToyTransformer pruned = dsee::prune_heads(model, 0.25);
        CHECK(dsee::prune_heads(dsee::prune_heads(model, 0.0), 0.25) == pruned);
    }

    TEST_CASE("quarter ratio removes exactly one of four heads per layer") {
        Rng rng(23);
        ToyTransformer model = ToyTransformer::init(small_config(), rng);
        model.layers[0].gates = {0.9f, 0.05f, 0.7f, 0.4f};
        model.layers[1].gates = {0.2f, 0.8f, 0.01f, 0.5f};
        const ToyTransformer pruned = dsee::prune_heads(model, 0.25);
        CHECK(pruned.cfg.n_heads == 3);
        for (const auto& layer : pruned.layers) {
            CHECK(layer.gates.size() == 3);
            CHECK(layer.wq.weight.rows() == 12);
            CHECK(layer.wo.weight.cols() == 12);
            CHECK(layer.wo.weight.rows() == 16);
        }
        // least-|gate| heads were removed
        CHECK(pruned.layers[0].gates == std::vector<float>{0.9f, 0.7f, 0.4f});
        CHECK(pruned.layers[1].gates == std::vector<float>{0.2f, 0.8f, 0.5f});
    }

    TEST_CASE("pruned forward equals zero-gate forward") {
        Rng rng(29);
        ToyTransformer model = ToyTransformer::init(small_config(), rng);
        for (auto& layer : model.layers) {
            for (dsee::AdaptedLinear* lin : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
                lin->adapter = dsee::init_update(lin->weight, 2, 6,
                                                 dsee::SupportMethod::Magnitude, rng);
                for (auto& u : lin->adapter->u.data()) {
                    u = static_cast<float>(rng.normal(0.0, 0.05));
                }
                for (auto& s : lin->adapter->s2_values) {
                    s = static_cast<float>(rng.normal(0.0, 0.05));
                }
            }
            for (auto& g : layer.gates) g = static_cast<float>(0.2 + rng.uniform01());
        }
        model.layers[0].gates[1] = 0.01f;
        model.layers[1].gates[3] = 0.02f;

        const dsee::TokenBatch tokens = small_batch(model.cfg, rng, 4);
        ToyTransformer gated = model;
        gated.layers[0].gates[1] = 0.0f;
        gated.layers[1].gates[3] = 0.0f;
        const ToyTransformer pruned = dsee::prune_heads(model, 0.25);
        const DenseMatrix expected = dsee::forward_logits(gated, tokens);
        const DenseMatrix actual = dsee::forward_logits(pruned, tokens);
        CHECK(dsee::max_abs_diff(actual, expected) <= 1e-5);
    }

    TEST_CASE("removing all heads rejected") {
        Rng rng(31);
        const ToyTransformer model = ToyTransformer::init(small_config(), rng);
        CHECK_THROWS_AS(dsee::prune_heads(model, 0.99), dsee::ParameterError);
    }
}

TEST_SUITE("prune_ffn") {
    TEST_CASE("keeps the highest-norm units and shrinks both mats") {
        Rng rng(37);
        ToyTransformer model = ToyTransformer::init(small_config(), rng);
        const ToyTransformer pruned = dsee::prune_ffn(model, 0.25);
        CHECK(pruned.cfg.d_ff == 18);
        CHECK(pruned.layers[0].ffn_w1.rows() == 18);
        CHECK(pruned.layers[0].ffn_w2.cols() == 18);

        const auto kept = dsee::kept_ffn_after_prune(model, 0.25);
        // dropped units have norms no larger than any kept unit
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            auto norm_of = [&](std::size_t unit) {
                double acc = 0.0;
                for (std::size_t j = 0; j < 16; ++j) {
                    acc += static_cast<double>(model.layers[l].ffn_w1(unit, j)) *
                           model.layers[l].ffn_w1(unit, j);
                }
                for (std::size_t j = 0; j < 16; ++j) {
                    acc += static_cast<double>(model.layers[l].ffn_w2(j, unit)) *
                           model.layers[l].ffn_w2(j, unit);
                }
                return acc;
            };
            double min_kept = 1e300;
            for (std::size_t unit : kept[l]) min_kept = std::min(min_kept, norm_of(unit));
            for (std::size_t unit = 0; unit < 24; ++unit) {
                if (std::find(kept[l].begin(), kept[l].end(), unit) == kept[l].end()) {
                    CHECK(norm_of(unit) <= min_kept + 1e-12);
                }
            }
        }
    }

    TEST_CASE("structured flops decrease strictly with more pruning") {
        dsee::ArchSpec arch{2, 16, 4, 4, 24, 4};
        std::uint64_t prev = std::numeric_limits<std::uint64_t>::max();
        for (int kept_heads = 4; kept_heads >= 1; --kept_heads) {
            const std::uint64_t flops =
                dsee::estimate_flops(arch, 6, 8, 64,
                                     dsee::MaskState::structured(kept_heads, 24),
                                     dsee::AdapterState::none());
            CHECK(flops < prev);
            prev = flops;
        }
        prev = std::numeric_limits<std::uint64_t>::max();
        for (int kept_ffn = 24; kept_ffn >= 6; kept_ffn -= 6) {
            const std::uint64_t flops =
                dsee::estimate_flops(arch, 6, 8, 64, dsee::MaskState::structured(4, kept_ffn),
                                     dsee::AdapterState::none());
            CHECK(flops < prev);
            prev = flops;
        }
    }
}
