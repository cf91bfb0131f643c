#include "mace/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace mace {

namespace {

void require_shape(bool ok, const char* what) {
    if (!ok) throw DimensionMismatch(what);
}

} // namespace

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    require_shape(a.cols == b.rows, "matmul: inner dimensions differ");
    DenseMatrix c(a.rows, b.cols);
    const std::int64_t n = static_cast<std::int64_t>(a.rows);
#pragma omp parallel for schedule(static) if (a.rows * a.cols * b.cols > 32768)
    for (std::int64_t i = 0; i < n; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

DenseMatrix matmul_transB(const DenseMatrix& a, const DenseMatrix& b) {
    require_shape(a.cols == b.cols, "matmul_transB: inner dimensions differ");
    DenseMatrix c(a.rows, b.rows);
    const std::int64_t n = static_cast<std::int64_t>(a.rows);
#pragma omp parallel for schedule(static) if (a.rows * a.cols * b.rows > 32768)
    for (std::int64_t i = 0; i < n; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            crow[j] = s;
        }
    }
    return c;
}

DenseMatrix matmul_transA(const DenseMatrix& a, const DenseMatrix& b) {
    require_shape(a.rows == b.rows, "matmul_transA: inner dimensions differ");
    DenseMatrix c(a.cols, b.cols);
    const std::int64_t n = static_cast<std::int64_t>(a.cols);
#pragma omp parallel for schedule(static) if (a.rows * a.cols * b.cols > 32768)
    for (std::int64_t i = 0; i < n; ++i) {
        double* crow = c.row(i);
        for (std::size_t k = 0; k < a.rows; ++k) {
            const double aki = a.at(k, i);
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

DenseMatrix softmax_rows(const DenseMatrix& m) {
    DenseMatrix out(m.rows, m.cols);
    const std::int64_t n = static_cast<std::int64_t>(m.rows);
#pragma omp parallel for schedule(static) if (m.rows * m.cols > 16384)
    for (std::int64_t i = 0; i < n; ++i) {
        const double* src = m.row(i);
        double* dst = out.row(i);
        double mx = src[0];
        for (std::size_t j = 1; j < m.cols; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (std::size_t j = 0; j < m.cols; ++j) dst[j] /= sum;
    }
    return out;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    require_shape(a.same_shape(b), "add: shape mismatch");
    DenseMatrix c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    require_shape(a.same_shape(b), "sub: shape mismatch");
    DenseMatrix c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

DenseMatrix scale(const DenseMatrix& a, double s) {
    DenseMatrix c = a;
    for (auto& x : c.data) x *= s;
    return c;
}

void add_in_place(DenseMatrix& a, const DenseMatrix& b, double s) {
    require_shape(a.same_shape(b), "add_in_place: shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += s * b.data[i];
}

void add_outer(DenseMatrix& a, const std::vector<double>& u,
               const std::vector<double>& v, double s) {
    require_shape(a.rows == u.size() && a.cols == v.size(), "add_outer: shape mismatch");
    for (std::size_t i = 0; i < u.size(); ++i) {
        double* arow = a.row(i);
        const double su = s * u[i];
        for (std::size_t j = 0; j < v.size(); ++j) arow[j] += su * v[j];
    }
}

std::vector<double> matvec(const DenseMatrix& a, const std::vector<double>& x) {
    require_shape(a.cols == x.size(), "matvec: shape mismatch");
    std::vector<double> y(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += arow[j] * x[j];
        y[i] = s;
    }
    return y;
}

std::vector<double> vecmat(const std::vector<double>& x, const DenseMatrix& a) {
    require_shape(a.rows == x.size(), "vecmat: shape mismatch");
    std::vector<double> y(a.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        const double xi = x[i];
        for (std::size_t j = 0; j < a.cols; ++j) y[j] += xi * arow[j];
    }
    return y;
}

double sigmoid(double x) {
    // Branch on sign to avoid overflow in exp for large |x|.
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double frobenius_sq(const DenseMatrix& m) {
    double s = 0.0;
    for (double x : m.data) s += x * x;
    return s;
}

double frobenius_dist(const DenseMatrix& a, const DenseMatrix& b) {
    require_shape(a.same_shape(b), "frobenius_dist: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double max_abs(const DenseMatrix& m) {
    double mx = 0.0;
    for (double x : m.data) mx = std::max(mx, std::fabs(x));
    return mx;
}

DenseMatrix solve_spd(const DenseMatrix& a, const DenseMatrix& rhs) {
    require_shape(a.rows == a.cols, "solve_spd: A must be square");
    require_shape(rhs.cols == a.rows, "solve_spd: RHS.cols must equal A.rows");
    const std::size_t n = a.rows;

    // Symmetry precondition, 1e-12 relative.
    const double scale_a = std::max(1.0, max_abs(a));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::fabs(a.at(i, j) - a.at(j, i)) > 1e-12 * scale_a)
                throw Error("solve_spd: matrix not symmetric");

    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, a.at(i, i));

    // Cholesky A = L L^T, lower triangular in-place copy.
    DenseMatrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a.at(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l.at(j, k) * l.at(j, k);
        if (d <= 1e-14 * max_diag)
            throw NotPositiveDefinite(
                "solve_spd: pivot below tolerance (prior cache likely under-determined)");
        const double ljj = std::sqrt(d);
        l.at(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
            l.at(i, j) = s / ljj;
        }
    }

    // X A = RHS  <=>  A X^T = RHS^T; solve per row of RHS.
    DenseMatrix x(rhs.rows, n);
    const std::int64_t nr = static_cast<std::int64_t>(rhs.rows);
#pragma omp parallel for schedule(static) if (rhs.rows * n * n > 32768)
    for (std::int64_t r = 0; r < nr; ++r) {
        std::vector<double> y(n);
        // forward: L y = rhs_row
        for (std::size_t i = 0; i < n; ++i) {
            double s = rhs.at(r, i);
            for (std::size_t k = 0; k < i; ++k) s -= l.at(i, k) * y[k];
            y[i] = s / l.at(i, i);
        }
        // backward: L^T x = y
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= l.at(k, ii) * x.at(r, k);
            x.at(r, ii) = s / l.at(ii, ii);
        }
    }
    return x;
}

namespace serial {

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows) throw DimensionMismatch("serial::matmul: inner dimensions differ");
    DenseMatrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

DenseMatrix softmax_rows(const DenseMatrix& m) {
    DenseMatrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* src = m.row(i);
        double* dst = out.row(i);
        double mx = src[0];
        for (std::size_t j = 1; j < m.cols; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (std::size_t j = 0; j < m.cols; ++j) dst[j] /= sum;
    }
    return out;
}

} // namespace serial

void AdamOptimizer::update(DenseMatrix& param, const DenseMatrix& grad, double lr) {
    if (grad.rows != param.rows || grad.cols != param.cols ||
        m.rows != param.rows || m.cols != param.cols)
        throw DimensionMismatch("AdamOptimizer::update: shape mismatch");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < param.data.size(); ++i) {
        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * grad.data[i];
        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * grad.data[i] * grad.data[i];
        param.data[i] -= lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + eps);
    }
}

} // namespace mace
