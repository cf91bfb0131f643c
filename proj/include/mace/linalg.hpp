#pragma once

#include "mace/matrix.hpp"

namespace mace {

// Parallel kernels. Each output element is accumulated by exactly one
// thread in a fixed order, so results are bitwise identical to the serial
// reference for any thread count.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// a * b^T without materializing the transpose.
DenseMatrix matmul_transB(const DenseMatrix& a, const DenseMatrix& b);
// a^T * b.
DenseMatrix matmul_transA(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& m);
DenseMatrix softmax_rows(const DenseMatrix& m);

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix scale(const DenseMatrix& a, double s);
void add_in_place(DenseMatrix& a, const DenseMatrix& b, double s = 1.0);
// a += s * u v^T
void add_outer(DenseMatrix& a, const std::vector<double>& u,
               const std::vector<double>& v, double s = 1.0);

std::vector<double> matvec(const DenseMatrix& a, const std::vector<double>& x);
// x^T A, i.e. A^T x.
std::vector<double> vecmat(const std::vector<double>& x, const DenseMatrix& a);

double sigmoid(double x);
double frobenius_sq(const DenseMatrix& m);
double frobenius_dist(const DenseMatrix& a, const DenseMatrix& b);
double max_abs(const DenseMatrix& m);

// Solves X * A = RHS for X, with A square symmetric positive definite
// (the right-multiplied inverse form used by the closed-form editors).
// Throws NotPositiveDefinite when a Cholesky pivot falls at or below
// 1e-14 times the largest diagonal entry.
DenseMatrix solve_spd(const DenseMatrix& a, const DenseMatrix& rhs);

// Adam update state for one parameter matrix. Step counter is 1-based and
// advances on every update call.
struct AdamOptimizer {
    DenseMatrix m, v;
    int t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamOptimizer(const DenseMatrix& param)
        : m(param.rows, param.cols), v(param.rows, param.cols) {}

    void update(DenseMatrix& param, const DenseMatrix& grad, double lr);
};

// Serial reference kernels; kept for tests and the kernel benchmark.
namespace serial {
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix softmax_rows(const DenseMatrix& m);
} // namespace serial

} // namespace mace
