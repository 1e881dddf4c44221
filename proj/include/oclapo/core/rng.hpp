#pragma once

#include <cmath>
#include <cstdint>

namespace oclapo {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stable derivation of independent seed streams from a base seed.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t s = base ^ (0x517cc1b727220a95ULL * (stream + 1));
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(base, a), b);
}

// xoshiro256** with splitmix-seeded state. All distributions are built from
// raw bits so streams are identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // Lemire-style rejection to avoid modulo bias.
        uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        uint64_t l = static_cast<uint64_t>(m);
        if (l < n) {
            const uint64_t t = (0 - n) % n;
            while (l < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                l = static_cast<uint64_t>(m);
            }
        }
        return static_cast<uint64_t>(m >> 64);
    }

    /// Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Smooth 1-D lattice noise in [-1,1]: hashed values at integer knots,
/// cosine-interpolated between them. Pure function of (seed, t).
inline double smooth_noise(uint64_t seed, double t) {
    const auto knot = [seed](int64_t i) {
        uint64_t s = derive_seed(seed, static_cast<uint64_t>(i + (1LL << 32)));
        return 2.0 * (static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53) - 1.0;
    };
    const double f = std::floor(t);
    const auto i = static_cast<int64_t>(f);
    const double u = t - f;
    const double w = 0.5 - 0.5 * std::cos(3.14159265358979323846 * u);
    return knot(i) * (1.0 - w) + knot(i + 1) * w;
}

}  // namespace oclapo
