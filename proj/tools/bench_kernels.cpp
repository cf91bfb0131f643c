// Timing comparison between the OpenMP kernels and their serial reference
// implementations, with a bitwise equality check on each result.
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "mace/linalg.hpp"
#include "mace/rng.hpp"

using namespace mace;

namespace {

double time_best_of(int reps, const std::function<void()>& fn) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const auto start = std::chrono::steady_clock::now();
        fn();
        best = std::min(best, std::chrono::duration<double>(
                                  std::chrono::steady_clock::now() - start)
                                  .count());
    }
    return best;
}

void bench_matmul(std::size_t m, std::size_t k, std::size_t n, SeededRng& rng) {
    const DenseMatrix a = DenseMatrix::random_normal(m, k, rng);
    const DenseMatrix b = DenseMatrix::random_normal(k, n, rng);
    DenseMatrix out_p, out_s;
    const double tp = time_best_of(5, [&] { out_p = matmul(a, b); });
    const double ts = time_best_of(5, [&] { out_s = serial::matmul(a, b); });
    std::printf("matmul  %4zux%-4zu * %4zux%-4zu  parallel %8.3f ms  serial %8.3f ms"
                "  speedup %5.2fx  bitwise %s\n",
                m, k, k, n, tp * 1e3, ts * 1e3, ts / tp,
                out_p == out_s ? "equal" : "DIFFER");
}

void bench_softmax(std::size_t rows, std::size_t cols, SeededRng& rng) {
    const DenseMatrix z = DenseMatrix::random_normal(rows, cols, rng);
    DenseMatrix out_p, out_s;
    const double tp = time_best_of(5, [&] { out_p = softmax_rows(z); });
    const double ts = time_best_of(5, [&] { out_s = serial::softmax_rows(z); });
    std::printf("softmax %4zux%-4zu rows            parallel %8.3f ms  serial %8.3f ms"
                "  speedup %5.2fx  bitwise %s\n",
                rows, cols, tp * 1e3, ts * 1e3, ts / tp,
                out_p == out_s ? "equal" : "DIFFER");
}

} // namespace

int main() {
    SeededRng rng(42);
    std::puts("kernel benchmark (best of 5 runs; small sizes stay on the serial path)");
    // Below the parallel thresholds.
    bench_matmul(16, 24, 32, rng);
    bench_softmax(16, 64, rng);
    // Above the thresholds.
    bench_matmul(256, 256, 256, rng);
    bench_matmul(512, 384, 512, rng);
    bench_softmax(512, 512, rng);
    bench_softmax(2048, 1024, rng);
    return 0;
}
