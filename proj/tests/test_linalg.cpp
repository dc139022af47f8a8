#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dsee/matrix.hpp"
#include "support.hpp"

using dsee::DenseMatrix;
using dsee::Rng;

TEST_SUITE("rng") {
    TEST_CASE("identical seeds give bit-identical streams") {
        Rng a(123456789), b(123456789);
        for (int i = 0; i < 1000; ++i) {
            CHECK(a.next_u64() == b.next_u64());
        }
        Rng c(42), d(42);
        for (int i = 0; i < 200; ++i) {
            CHECK(c.normal() == d.normal());
            CHECK(c.uniform01() == d.uniform01());
        }
    }

    TEST_CASE("derived streams differ from parent and are reproducible") {
        Rng base(7);
        Rng x = base.derive("alpha");
        Rng y = base.derive("alpha");
        Rng z = base.derive("beta");
        CHECK(x.next_u64() == y.next_u64());
        CHECK(x.next_u64() != z.next_u64());
    }

    TEST_CASE("normal sampler has roughly standard moments") {
        Rng rng(99);
        double sum = 0.0, sum_sq = 0.0;
        const int n = 40000;
        for (int i = 0; i < n; ++i) {
            const double x = rng.normal();
            sum += x;
            sum_sq += x * x;
        }
        CHECK(std::abs(sum / n) < 0.03);
        CHECK(std::abs(sum_sq / n - 1.0) < 0.05);
    }

    TEST_CASE("bounded rejects zero and stays in range") {
        Rng rng(5);
        CHECK_THROWS_AS(rng.bounded(0), dsee::ParameterError);
        for (int i = 0; i < 1000; ++i) {
            CHECK(rng.bounded(7) < 7);
        }
    }
}

TEST_SUITE("dense_matrix") {
    TEST_CASE("construction validates length and finiteness") {
        CHECK_THROWS_AS(DenseMatrix(2, 2, {1.0f, 2.0f}), dsee::ShapeError);
        CHECK_THROWS_AS(DenseMatrix(1, 2, {1.0f, std::numeric_limits<float>::infinity()}),
                        dsee::InputError);
        CHECK_THROWS_AS(DenseMatrix(1, 1, {std::nanf("")}), dsee::InputError);
        const DenseMatrix m = DenseMatrix::from_rows({{1, 2}, {3, 4}});
        CHECK(m(1, 0) == 3.0f);
        CHECK_THROWS_AS((void)m.at(2, 0), dsee::ShapeError);
    }
}

TEST_SUITE("matmul") {
    TEST_CASE("identity times a is a") {
        const DenseMatrix a = DenseMatrix::from_rows({{1, -2}, {0.5f, 4}});
        CHECK(matmul(DenseMatrix::identity(2), a) == a);
    }

    TEST_CASE("hand case") {
        const DenseMatrix a = DenseMatrix::from_rows({{1, 2}, {3, 4}});
        const DenseMatrix b = DenseMatrix::from_rows({{0}, {1}});
        const DenseMatrix expected = DenseMatrix::from_rows({{2}, {4}});
        CHECK(matmul(a, b) == expected);
    }

    TEST_CASE("random 7x5 x 5x3 matches triple-loop oracle") {
        Rng rng(11);
        const DenseMatrix a = dsee::gaussian_matrix(7, 5, rng);
        const DenseMatrix b = dsee::gaussian_matrix(5, 3, rng);
        CHECK(dsee::max_abs_diff(matmul(a, b), testsupport::matmul_oracle(a, b)) <= 1e-6);
    }

    TEST_CASE("dimension mismatch throws") {
        CHECK_THROWS_AS(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), dsee::ShapeError);
    }

    TEST_CASE("associativity against the oracle at 1e-5 relative") {
        Rng rng(21);
        for (int trial = 0; trial < 5; ++trial) {
            const DenseMatrix a = dsee::gaussian_matrix(16, 16, rng);
            const DenseMatrix b = dsee::gaussian_matrix(16, 16, rng);
            const DenseMatrix c = dsee::gaussian_matrix(16, 16, rng);
            const DenseMatrix left = matmul(matmul(a, b), c);
            const DenseMatrix right = matmul(a, matmul(b, c));
            const double scale = std::max(1e-12, dsee::frobenius_norm(left));
            CHECK(dsee::max_abs_diff(left, right) / scale <= 1e-5);
        }
    }
}

TEST_SUITE("orthonormalize") {
    TEST_CASE("identity stays identity") {
        CHECK(orthonormalize(DenseMatrix::identity(3)) == DenseMatrix::identity(3));
    }

    TEST_CASE("single column normalizes") {
        const DenseMatrix q = orthonormalize(DenseMatrix::from_rows({{3}, {4}}));
        CHECK(q(0, 0) == doctest::Approx(0.6).epsilon(1e-6));
        CHECK(q(1, 0) == doctest::Approx(0.8).epsilon(1e-6));
    }

    TEST_CASE("random 64x8 gives q with orthonormal columns") {
        Rng rng(31);
        const DenseMatrix q = orthonormalize(dsee::gaussian_matrix(64, 8, rng));
        const DenseMatrix gram = matmul(dsee::transpose(q), q);
        CHECK(dsee::max_abs_diff(gram, DenseMatrix::identity(8)) <= 1e-5);
    }

    TEST_CASE("rank-deficient input raises degenerate error") {
        DenseMatrix b(4, 2);
        for (std::size_t i = 0; i < 4; ++i) {
            b(i, 0) = static_cast<float>(i + 1);
            b(i, 1) = static_cast<float>(2 * (i + 1)); // same direction
        }
        CHECK_THROWS_AS(orthonormalize(b), dsee::DegenerateInputError);
    }

    TEST_CASE("wide input rejected") {
        CHECK_THROWS_AS(orthonormalize(DenseMatrix(2, 3)), dsee::ShapeError);
    }
}

TEST_SUITE("randomized_low_rank") {
    TEST_CASE("zero matrix factors to zero") {
        Rng rng(41);
        const auto [u, v] = dsee::randomized_low_rank(DenseMatrix(8, 8), 2, 2, rng);
        CHECK(dsee::frobenius_norm(matmul(u, v)) == 0.0);
    }

    TEST_CASE("planted rank-1 outer product") {
        Rng rng(43);
        const DenseMatrix x = dsee::gaussian_matrix(12, 1, rng);
        const DenseMatrix y = dsee::gaussian_matrix(1, 9, rng);
        const DenseMatrix a = testsupport::matmul_oracle(x, y);
        const auto [u, v] = dsee::randomized_low_rank(a, 1, 2, rng);
        const double rel = dsee::frobenius_norm(subtract(a, matmul(u, v))) /
                           std::max(dsee::frobenius_norm(a), 1e-12);
        CHECK(rel <= 1e-5);
    }

    TEST_CASE("planted rank-4 64x48 with two power iterations") {
        Rng rng(47);
        const DenseMatrix g1 = dsee::gaussian_matrix(64, 4, rng);
        const DenseMatrix g2 = dsee::gaussian_matrix(4, 48, rng);
        const DenseMatrix a = testsupport::matmul_oracle(g1, g2);
        const auto [u, v] = dsee::randomized_low_rank(a, 4, 2, rng);
        const double rel = dsee::frobenius_norm(subtract(a, matmul(u, v))) /
                           std::max(dsee::frobenius_norm(a), 1e-12);
        CHECK(rel <= 1e-4);
    }

    TEST_CASE("same seed is bit-identical") {
        Rng data_rng(53);
        const DenseMatrix a = dsee::gaussian_matrix(20, 16, data_rng);
        Rng r1(99), r2(99);
        const auto f1 = dsee::randomized_low_rank(a, 5, 2, r1);
        const auto f2 = dsee::randomized_low_rank(a, 5, 2, r2);
        CHECK(f1.u == f2.u);
        CHECK(f1.v == f2.v);
    }

    TEST_CASE("r above min dimension rejected") {
        Rng rng(1);
        CHECK_THROWS_AS(dsee::randomized_low_rank(DenseMatrix(4, 6), 5, 2, rng),
                        dsee::ParameterError);
    }

    TEST_CASE("within 1.5x of the best rank-r error from the svd oracle") {
        Rng rng(61);
        for (const auto& [m, n, r] : {std::tuple<int, int, int>{24, 24, 3},
                                      {40, 32, 5},
                                      {64, 64, 8},
                                      {33, 17, 2}}) {
            for (int trial = 0; trial < 3; ++trial) {
                DenseMatrix a = dsee::gaussian_matrix(m, n, rng);
                // superimpose some structure so the tail is not everything
                DenseMatrix g1 = dsee::gaussian_matrix(m, r, rng);
                DenseMatrix g2 = dsee::gaussian_matrix(r, n, rng);
                const DenseMatrix structure = testsupport::matmul_oracle(g1, g2);
                for (std::size_t i = 0; i < a.size(); ++i) {
                    a.data()[i] = a.data()[i] * 0.2f + structure.data()[i];
                }
                const auto [u, v] = dsee::randomized_low_rank(a, r, 2, rng);
                const double achieved = dsee::frobenius_norm(subtract(a, matmul(u, v)));
                const double best = testsupport::best_rank_r_error(a, r);
                CHECK(achieved <= best * 1.5 + 1e-9);
            }
        }
    }
}
