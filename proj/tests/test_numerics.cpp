#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mace/linalg.hpp"
#include "mace/matrix.hpp"
#include "mace/rng.hpp"

using namespace mace;

namespace {

DenseMatrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    SeededRng rng(seed);
    return DenseMatrix::random_normal(r, c, rng);
}

// Independent dense solver for X * A = RHS: Gaussian elimination with
// partial pivoting on A^T X^T = RHS^T, written without reference to the
// Cholesky path in the library.
DenseMatrix gauss_solve_right(const DenseMatrix& a, const DenseMatrix& rhs) {
    const std::size_t n = a.rows;
    DenseMatrix aug(n, n + rhs.rows);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) aug.at(i, j) = a.at(j, i);
        for (std::size_t r = 0; r < rhs.rows; ++r) aug.at(i, n + r) = rhs.at(r, i);
    }
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t i = col + 1; i < n; ++i)
            if (std::fabs(aug.at(i, col)) > std::fabs(aug.at(piv, col))) piv = i;
        if (piv != col)
            for (std::size_t j = 0; j < aug.cols; ++j)
                std::swap(aug.at(col, j), aug.at(piv, j));
        const double p = aug.at(col, col);
        for (std::size_t i = 0; i < n; ++i) {
            if (i == col) continue;
            const double f = aug.at(i, col) / p;
            for (std::size_t j = col; j < aug.cols; ++j)
                aug.at(i, j) -= f * aug.at(col, j);
        }
    }
    DenseMatrix x(rhs.rows, n);
    for (std::size_t r = 0; r < rhs.rows; ++r)
        for (std::size_t i = 0; i < n; ++i)
            x.at(r, i) = aug.at(i, n + r) / aug.at(i, i);
    return x;
}

DenseMatrix random_spd(std::size_t n, std::uint64_t seed) {
    // G G^T + n I is symmetric positive definite by construction.
    DenseMatrix g = random_matrix(n, n, seed);
    DenseMatrix a = matmul_transB(g, g);
    for (std::size_t i = 0; i < n; ++i) a.at(i, i) += static_cast<double>(n);
    return a;
}

} // namespace

TEST_CASE("matmul matches triple-loop oracle") {
    DenseMatrix a = random_matrix(5, 7, 10);
    DenseMatrix b = random_matrix(7, 4, 11);
    DenseMatrix c = matmul(a, b);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
            CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-12));
        }
    CHECK_THROWS_AS(matmul(a, random_matrix(6, 4, 12)), DimensionMismatch);
}

TEST_CASE("transposed products agree with explicit transposes") {
    DenseMatrix a = random_matrix(6, 5, 20);
    DenseMatrix b = random_matrix(3, 5, 21);
    DenseMatrix c = random_matrix(6, 4, 22);
    CHECK(frobenius_dist(matmul_transB(a, b), matmul(a, transpose(b))) < 1e-12);
    CHECK(frobenius_dist(matmul_transA(a, c), matmul(transpose(a), c)) < 1e-12);
    CHECK(transpose(transpose(a)) == a);
}

TEST_CASE("parallel kernels are bitwise identical to the serial reference") {
    // Large enough to trip the parallel thresholds in both kernels.
    DenseMatrix a = random_matrix(64, 48, 30);
    DenseMatrix b = random_matrix(48, 52, 31);
    CHECK(matmul(a, b) == serial::matmul(a, b));
    DenseMatrix z = random_matrix(150, 120, 32);
    CHECK(softmax_rows(z) == serial::softmax_rows(z));
}

TEST_CASE("softmax rows") {
    DenseMatrix z(1, 2);
    z.at(0, 0) = 0.0;
    z.at(0, 1) = std::log(3.0);
    DenseMatrix s = softmax_rows(z);
    CHECK(s.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

    DenseMatrix m = random_matrix(7, 9, 40);
    DenseMatrix shifted = m;
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) shifted.at(i, j) += 17.5;
    CHECK(frobenius_dist(softmax_rows(m), softmax_rows(shifted)) < 1e-12);

    DenseMatrix sm = softmax_rows(m);
    for (std::size_t i = 0; i < sm.rows; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < sm.cols; ++j) {
            CHECK(sm.at(i, j) >= 0.0);
            sum += sm.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("sigmoid values and saturation") {
    CHECK(sigmoid(0.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sigmoid(5.0) == doctest::Approx(1.0 / (1.0 + std::exp(-5.0))).epsilon(1e-15));
    CHECK(sigmoid(-3.0) == doctest::Approx(1.0 - sigmoid(3.0)).epsilon(1e-14));
    CHECK(sigmoid(1000.0) == doctest::Approx(1.0));
    CHECK(sigmoid(-1000.0) == doctest::Approx(0.0));
}

TEST_CASE("frobenius norms") {
    DenseMatrix m(1, 2);
    m.at(0, 0) = 3.0;
    m.at(0, 1) = 4.0;
    CHECK(frobenius_sq(m) == doctest::Approx(25.0).epsilon(1e-15));
    CHECK(frobenius_dist(m, DenseMatrix::zeros(1, 2)) == doctest::Approx(5.0));
    CHECK(max_abs(m) == doctest::Approx(4.0));
}

TEST_CASE("vector products match loop oracles") {
    DenseMatrix a = random_matrix(4, 6, 50);
    SeededRng rng(51);
    std::vector<double> x(6), u(4);
    for (auto& v : x) v = rng.normal();
    for (auto& v : u) v = rng.normal();

    const auto y = matvec(a, x);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += a.at(i, j) * x[j];
        CHECK(y[i] == doctest::Approx(s).epsilon(1e-12));
    }
    const auto w = vecmat(u, a);
    for (std::size_t j = 0; j < a.cols; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) s += u[i] * a.at(i, j);
        CHECK(w[j] == doctest::Approx(s).epsilon(1e-12));
    }

    DenseMatrix acc = a;
    add_outer(acc, u, x, 2.5);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j)
            CHECK(acc.at(i, j) == doctest::Approx(a.at(i, j) + 2.5 * u[i] * x[j]));
}

TEST_CASE("solve_spd on identity and diagonal systems") {
    DenseMatrix rhs = random_matrix(3, 5, 60);
    CHECK(frobenius_dist(solve_spd(DenseMatrix::identity(5), rhs), rhs) < 1e-14);

    DenseMatrix d(4, 4);
    for (std::size_t i = 0; i < 4; ++i) d.at(i, i) = static_cast<double>(i + 1);
    DenseMatrix r2 = random_matrix(2, 4, 61);
    DenseMatrix x = solve_spd(d, r2);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(x.at(r, i) == doctest::Approx(r2.at(r, i) / (i + 1.0)).epsilon(1e-14));
}

TEST_CASE("solve_spd matches Gaussian elimination on 20 random systems") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t n = 2 + seed % 7; // up to 8
        DenseMatrix a = random_spd(n, 100 + seed);
        DenseMatrix rhs = random_matrix(3 + seed % 4, n, 200 + seed);
        DenseMatrix x = solve_spd(a, rhs);
        DenseMatrix x_ref = gauss_solve_right(a, rhs);
        const double rel = frobenius_dist(x, x_ref) /
                           std::max(1e-30, std::sqrt(frobenius_sq(x_ref)));
        CHECK(rel <= 1e-10);
        // Residual check: X A must reproduce RHS.
        CHECK(frobenius_dist(matmul(x, a), rhs) < 1e-8);
    }
}

TEST_CASE("solve_spd rejects bad inputs") {
    DenseMatrix singular(3, 3); // all zeros: pivot immediately under tolerance
    DenseMatrix rhs = random_matrix(2, 3, 70);
    CHECK_THROWS_AS(solve_spd(singular, rhs), NotPositiveDefinite);

    // Rank-1 Gram matrix of a 3-dimensional space is singular too.
    DenseMatrix g(3, 3);
    std::vector<double> v = {1.0, 2.0, -1.0};
    add_outer(g, v, v);
    CHECK_THROWS_AS(solve_spd(g, rhs), NotPositiveDefinite);

    DenseMatrix asym = random_matrix(3, 3, 71);
    CHECK_THROWS_AS(solve_spd(asym, rhs), Error);
    CHECK_THROWS_AS(solve_spd(DenseMatrix::identity(4), rhs), DimensionMismatch);
}

TEST_CASE("seeded rng is reproducible and derivation is order-independent") {
    SeededRng a(123), b(123);
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());

    SeededRng base(9);
    SeededRng before = base.derive(42);
    base.next_u64();
    base.next_u64();
    SeededRng after = base.derive(42);
    CHECK(before.next_u64() == after.next_u64());

    SeededRng u(77);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}

TEST_CASE("matrix file round-trip is bitwise exact") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mace_test_numerics";
    fs::create_directories(dir);
    const std::string path = (dir / "m.mat").string();

    DenseMatrix m = random_matrix(9, 5, 80);
    m.at(0, 0) = 0.1 + 0.2; // value without a short decimal representation
    write_matrix(path, m);
    DenseMatrix back = read_matrix(path);
    CHECK(back == m);

    CHECK_THROWS_AS(read_matrix((dir / "missing.mat").string()), IoError);
    std::ofstream((dir / "junk.mat").string()) << "not a matrix";
    CHECK_THROWS_AS(read_matrix((dir / "junk.mat").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("adam optimizer") {
    DenseMatrix p = random_matrix(3, 4, 90);
    const DenseMatrix p0 = p;
    AdamOptimizer opt(p);

    // Zero gradient leaves the parameter untouched.
    opt.update(p, DenseMatrix::zeros(3, 4), 0.1);
    CHECK(p == p0);

    // First nonzero step of a fresh optimizer moves by roughly lr per
    // coordinate (bias-corrected m/sqrt(v) is sign(g) on step one).
    AdamOptimizer fresh(p);
    DenseMatrix g(3, 4);
    for (auto& x : g.data) x = 2.0;
    fresh.update(p, g, 0.1);
    for (std::size_t i = 0; i < p.data.size(); ++i)
        CHECK(p.data[i] == doctest::Approx(p0.data[i] - 0.1).epsilon(1e-6));

    CHECK_THROWS_AS(opt.update(p, DenseMatrix::zeros(2, 4), 0.1), DimensionMismatch);
}
