#pragma once

#include <cmath>
#include <cstdint>

namespace frailt {

/// SplitMix64 stream. Every random decision in the project (init, shuffling,
/// sampling) draws from this generator so runs are reproducible bit-for-bit
/// across standard libraries.
///
///   state += 0x9E3779B97F4A7C15
///   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)
///
/// uniform() maps the top 53 bits to [0, 1).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

    std::uint64_t next() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n) by rejection; n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = next();
        while (r >= limit) {
            r = next();
        }
        return r % n;
    }

    // Box-Muller; one draw per call, no cached spare.
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

// Derives an independent stream seed from a base seed and a label.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t label) noexcept {
    Rng r(seed ^ (label * 0xD1B54A32D192ED03ULL));
    return r.next();
}

}  // namespace frailt
