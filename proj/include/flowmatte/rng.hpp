#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>

#include "flowmatte/common.hpp"

namespace flowmatte {

/// Deterministic xoshiro256** generator seeded through splitmix64.
/// Self-contained so sequences are reproducible independent of the
/// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no cached second value, so the
    /// state stream stays trivially serializable).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        if (lo > hi) throw ParamError(strf("uniform_int: lo %d > hi %d", lo, hi));
        std::uint64_t range = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int>(v % range);
    }

    void save(std::ostream& os) const {
        os.write(reinterpret_cast<const char*>(s_.data()), sizeof(s_));
    }
    void load(std::istream& is) {
        is.read(reinterpret_cast<char*>(s_.data()), sizeof(s_));
    }

    /// Independent stream derived from (seed, stream index); used to give
    /// each clip / chunk / worker its own reproducible generator.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t h = fnv1a(&seed, sizeof(seed));
        h = fnv1a(&stream, sizeof(stream), h);
        return h;
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9E3779B97f4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> s_{};
};

}  // namespace flowmatte
