#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "qalign/common.hpp"

namespace qalign {

// Deterministic, platform-independent RNG. std::mt19937 itself is portable
// but the standard distributions are not, so sampling is done by hand here.
// Core generator is splitmix64, which is more than enough for seeding,
// shuffles, dropout masks, and Gaussian init.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Unbiased integer in [0, bound) via rejection.
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw ConfigError("Rng::next_below: bound must be > 0");
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Uniform double in [0, 1) with 53 random bits.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller (the cosine branch only, so each call
    // consumes exactly two uniforms and stays reproducible).
    double next_normal() {
        double u1 = next_unit();
        double u2 = next_unit();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = next_below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t state_;
};

// All randomness in a run flows from one root seed. Subsystems get
// independent streams via subseed = splitmix64(root ^ fnv1a64(label)).
inline std::uint64_t derive_subseed(std::uint64_t root_seed,
                                    std::string_view label) {
    std::uint64_t h = fnv1a64(label.data(), label.size());
    Rng r(root_seed ^ h);
    return r.next_u64();
}

}  // namespace qalign
