#pragma once

#include <cstdint>

namespace mace {

// SplitMix64 generator. The algorithm is fixed so that identical seeds give
// identical draw sequences on every platform; do not swap it for an
// implementation-defined engine.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53 bits of entropy.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller (no cached spare, keeps state simple).
    double normal();

    std::uint64_t seed() const { return seed_; }

    // Independent stream derived from the original seed and a salt. The
    // derived sequence does not depend on how much of this generator has
    // been consumed, which keeps parallel per-item draws order-independent.
    SeededRng derive(std::uint64_t salt) const;

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

} // namespace mace
