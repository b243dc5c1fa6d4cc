#pragma once

// Deterministic random number generation. The engine is std::mt19937_64
// (bit-exact across platforms); uniform and normal draws are generated
// explicitly instead of through std::*_distribution, whose output is
// implementation-defined.

#include <cmath>
#include <cstdint>
#include <random>

namespace morphoflow {

struct Rng {
    std::mt19937_64 engine;

    explicit Rng(std::uint64_t seed = 0) : engine(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return double(engine() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // modulo bias is < 2^-40 for any n used here
        return engine() % n;
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable seed mixing so derived streams (per subject, per frame, per sample)
// do not depend on execution order. SplitMix64 finalizer.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace morphoflow
