#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace helena {

// Distributions are written out by hand instead of using <random>'s, whose
// outputs are implementation-defined; dataset files must be byte-identical
// across standard libraries. std::mt19937_64 itself is fully specified.

/// SplitMix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix_seed(mix_seed(base) ^ mix_seed(stream + 0x632BE59BD9B4E019ULL));
}

class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(mix_seed(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire-style rejection keeps the draw unbiased.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller (one value per call, the pair partner is cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

   private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace helena
