#include "mace/rng.hpp"

#include <cmath>

namespace mace {

double SeededRng::normal() {
    // Box-Muller on two fresh uniforms; u1 shifted away from zero.
    double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

SeededRng SeededRng::derive(std::uint64_t salt) const {
    // One splitmix scramble of (seed, salt) to decorrelate streams.
    std::uint64_t z = seed_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return SeededRng(z ^ (z >> 31));
}

} // namespace mace
