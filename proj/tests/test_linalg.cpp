#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fairtune/linalg.hpp"
#include "fairtune/rng.hpp"
#include "oracles.hpp"

using namespace fairtune;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(rows.size(), rows.begin()->size());
    std::size_t i = 0;
    for (const auto& r : rows) {
        std::size_t j = 0;
        for (double v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

double orthonormality_defect(const Matrix& q) {
    // max |q^T q - I|
    double worst = 0.0;
    for (std::size_t a = 0; a < q.cols; ++a)
        for (std::size_t b = 0; b < q.cols; ++b) {
            double d = 0.0;
            for (std::size_t i = 0; i < q.rows; ++i) d += q(i, a) * q(i, b);
            worst = std::max(worst, std::abs(d - (a == b ? 1.0 : 0.0)));
        }
    return worst;
}

void check_svd_contract(const Matrix& m, const SvdResult& f) {
    REQUIRE(f.s.size() == std::min(m.rows, m.cols));
    for (std::size_t i = 0; i + 1 < f.s.size(); ++i)
        REQUIRE(f.s[i] >= f.s[i + 1]);
    for (double s : f.s) REQUIRE(s >= 0.0);
    REQUIRE(orthonormality_defect(f.u) < 1e-8);
    REQUIRE(orthonormality_defect(f.v) < 1e-8);
    const double denom = std::max(frobenius_norm(m), 1e-30);
    REQUIRE(frobenius_norm(subtract(m, reconstruct(f))) / denom < 1e-8);
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
    auto a = from_rows({{1, 2}, {3, 4}});
    auto id = Matrix::identity(2);
    auto prod = matmul(a, id);
    REQUIRE(oracles::max_abs_diff(prod, a) == 0.0);

    auto row = from_rows({{1, 2}});
    auto col = from_rows({{3}, {4}});
    auto r = matmul(row, col);
    REQUIRE(r.rows == 1);
    REQUIRE(r.cols == 1);
    REQUIRE(r(0, 0) == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(42);
    auto a = oracles::random_matrix(5, 3, rng);
    auto b = oracles::random_matrix(3, 4, rng);
    REQUIRE(oracles::max_abs_diff(matmul(a, b), oracles::matmul_loops(a, b)) <
            1e-12);
}

TEST_CASE("matmul shape mismatch throws") {
    Matrix a(2, 3), b(2, 2);
    REQUIRE_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("scale_rows") {
    SECTION("identity diagonal leaves input unchanged") {
        Rng rng(1);
        auto m = oracles::random_matrix(4, 3, rng);
        auto out = scale_rows(DiagonalMatrix::identity(4), m);
        REQUIRE(oracles::max_abs_diff(out, m) == 0.0);
    }
    SECTION("hand case with a zero weight") {
        auto m = from_rows({{1, 1}, {1, 1}});
        auto out = scale_rows(DiagonalMatrix({2, 0}), m);
        REQUIRE(oracles::max_abs_diff(out, from_rows({{2, 2}, {0, 0}})) == 0.0);
    }
    SECTION("matches element-wise oracle") {
        Rng rng(7);
        auto m = oracles::random_matrix(6, 5, rng);
        DiagonalMatrix d;
        d.dim = 6;
        for (int i = 0; i < 6; ++i) d.diag.push_back(rng.uniform(0, 2));
        auto out = scale_rows(d, m);
        for (std::size_t i = 0; i < m.rows; ++i)
            for (std::size_t j = 0; j < m.cols; ++j)
                REQUIRE(std::abs(out(i, j) - d.diag[i] * m(i, j)) < 1e-14);
    }
    SECTION("dimension mismatch throws") {
        REQUIRE_THROWS_AS(scale_rows(DiagonalMatrix({1, 2}), Matrix(3, 2)),
                          ShapeError);
    }
    SECTION("equals multiplication by the expanded diagonal") {
        Rng rng(11);
        auto m = oracles::random_matrix(5, 4, rng);
        DiagonalMatrix d;
        d.dim = 5;
        for (int i = 0; i < 5; ++i) d.diag.push_back(rng.uniform(-2, 2));
        REQUIRE(oracles::max_abs_diff(scale_rows(d, m),
                                      matmul(to_dense(d), m)) < 1e-14);
    }
}

TEST_CASE("svd of diagonal matrix") {
    auto m = from_rows({{3, 0}, {0, 2}});
    auto f = svd(m);
    REQUIRE(f.s[0] == Catch::Approx(3.0).margin(1e-12));
    REQUIRE(f.s[1] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(oracles::max_abs_diff(f.u, Matrix::identity(2)) < 1e-12);
    REQUIRE(oracles::max_abs_diff(f.v, Matrix::identity(2)) < 1e-12);
}

TEST_CASE("svd of zero matrix") {
    Matrix m(2, 2);
    auto f = svd(m);
    REQUIRE(f.s[0] == 0.0);
    REQUIRE(f.s[1] == 0.0);
    check_svd_contract(m, f);
}

TEST_CASE("svd contract on random shapes") {
    Rng rng(3);
    for (auto [r, c] : {std::pair<std::size_t, std::size_t>{6, 4},
                        {4, 6},
                        {1, 5},
                        {5, 1},
                        {3, 3},
                        {40, 7}}) {
        auto m = oracles::random_matrix(r, c, rng);
        check_svd_contract(m, svd(m));
    }
}

TEST_CASE("svd singular values match Gram eigenvalue oracle") {
    Rng rng(17);
    auto m = oracles::random_matrix(6, 4, rng);
    auto f = svd(m);
    auto eigs = oracles::gram_eigenvalues(m);
    REQUIRE(eigs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        REQUIRE(f.s[i] * f.s[i] == Catch::Approx(eigs[i]).epsilon(1e-7));
}

TEST_CASE("svd handles rank-deficient input") {
    // two identical columns -> rank 1
    auto m = from_rows({{1, 1}, {2, 2}, {3, 3}});
    auto f = svd(m);
    check_svd_contract(m, f);
    REQUIRE(f.s[1] < 1e-10);
}

TEST_CASE("svd is reproducible") {
    Rng rng(23);
    auto m = oracles::random_matrix(5, 3, rng);
    auto f1 = svd(m);
    auto f2 = svd(m);
    REQUIRE(f1.u.data == f2.u.data);
    REQUIRE(f1.s == f2.s);
    REQUIRE(f1.v.data == f2.v.data);
}

TEST_CASE("svd rejects empty and non-finite input") {
    REQUIRE_THROWS_AS(svd(Matrix(0, 2)), InputError);
    Matrix bad(2, 2);
    bad(0, 0) = std::nan("");
    REQUIRE_THROWS_AS(svd(bad), NumericalError);
}

TEST_CASE("truncate") {
    SECTION("full-rank truncation is a no-op") {
        Rng rng(5);
        auto m = oracles::random_matrix(5, 3, rng);
        auto f = svd(m);
        auto t = truncate(f, 3);
        REQUIRE(t.s == f.s);
        REQUIRE(t.u.data == f.u.data);
        REQUIRE(t.v.data == f.v.data);
    }
    SECTION("keeps the dominant value") {
        auto f = svd(from_rows({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}}));
        auto t = truncate(f, 1);
        REQUIRE(t.s.size() == 1);
        REQUIRE(t.s[0] == Catch::Approx(3.0).margin(1e-12));
    }
    SECTION("rank out of range throws") {
        auto f = svd(Matrix::identity(3));
        REQUIRE_THROWS_AS(truncate(f, 0), RankError);
        REQUIRE_THROWS_AS(truncate(f, 4), RankError);
    }
    SECTION("Eckart-Young residual equals tail singular mass") {
        Rng rng(29);
        auto m = oracles::random_matrix(8, 4, rng);
        auto f = svd(m);
        auto err =
            frobenius_norm(subtract(m, reconstruct(truncate(f, 2))));
        auto expect = std::sqrt(f.s[2] * f.s[2] + f.s[3] * f.s[3]);
        REQUIRE(err == Catch::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("truncated svd beats random low-rank candidates") {
    Rng rng(31);
    auto m = oracles::random_matrix(6, 5, rng);
    auto f = svd(m);
    for (std::size_t r : {1, 2, 3}) {
        const double best =
            frobenius_norm(subtract(m, reconstruct(truncate(f, r))));
        for (int trial = 0; trial < 1000; ++trial) {
            auto q = matmul(oracles::random_matrix(6, r, rng),
                            oracles::random_matrix(r, 5, rng));
            REQUIRE(frobenius_norm(subtract(m, q)) >= best - 1e-12);
        }
    }
}
