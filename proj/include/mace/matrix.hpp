#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mace/errors.hpp"

namespace mace {

class SeededRng;

// Row-major dense matrix of doubles. The substrate for every projection,
// embedding stack and LoRA factor in the project.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    const double* row(std::size_t r) const { return data.data() + r * cols; }
    double* row(std::size_t r) { return data.data() + r * cols; }

    bool same_shape(const DenseMatrix& o) const {
        return rows == o.rows && cols == o.cols;
    }

    static DenseMatrix identity(std::size_t n);
    static DenseMatrix zeros(std::size_t r, std::size_t c) { return DenseMatrix(r, c); }
    static DenseMatrix random_normal(std::size_t r, std::size_t c, SeededRng& rng,
                                     double scale = 1.0);
};

bool operator==(const DenseMatrix& a, const DenseMatrix& b);

// Matrix persistence format used repo-wide: magic "MACE", u32 LE version,
// u64 LE rows, u64 LE cols, then row-major IEEE-754 binary64 LE payload.
void write_matrix(const std::string& path, const DenseMatrix& m);
DenseMatrix read_matrix(const std::string& path);

} // namespace mace
