#include "mace/matrix.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "mace/rng.hpp"

namespace mace {

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

DenseMatrix DenseMatrix::random_normal(std::size_t r, std::size_t c, SeededRng& rng,
                                       double scale) {
    DenseMatrix m(r, c);
    for (auto& x : m.data) x = scale * rng.normal();
    return m;
}

bool operator==(const DenseMatrix& a, const DenseMatrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

namespace {

constexpr char kMagic[4] = {'M', 'A', 'C', 'E'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void write_matrix(const std::string& path, const DenseMatrix& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u64(os, m.rows);
    put_u64(os, m.cols);
    for (double x : m.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        put_u64(os, bits);
    }
    if (!os) throw IoError("write failed: " + path);
}

DenseMatrix read_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad magic in matrix file: " + path);
    std::uint32_t version = get_u32(is);
    if (version != kVersion)
        throw IoError("unsupported matrix format version in " + path);
    std::uint64_t rows = get_u64(is);
    std::uint64_t cols = get_u64(is);
    DenseMatrix m(rows, cols);
    for (auto& x : m.data) {
        std::uint64_t bits = get_u64(is);
        std::memcpy(&x, &bits, 8);
    }
    if (!is) throw IoError("truncated matrix file: " + path);
    return m;
}

} // namespace mace
