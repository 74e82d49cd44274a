#pragma once

#include <cmath>
#include <cstdint>

namespace segfuse {

// Portable deterministic random stream used for every seeded artifact in the
// toolkit. The generator is pinned so independent implementations can
// reproduce byte-identical outputs:
//
//   seeding   SplitMix64, increment 0x9E3779B97F4A7C15,
//             mix constants 0xBF58476D1CE4E5B9 / 0x94D049BB133111EB
//   stream    xoshiro256++, rotations (23, 45), shift 17
//   doubles   (next() >> 11) * 2^-53, uniform in [0,1)
//   integers  128-bit multiply-high reduction of next() into [0,n)
//   normals   Box-Muller, two uniforms per call, cosine branch only

inline uint64_t splitmix64_next(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Decorrelates per-purpose substreams drawn from one master seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    uint64_t s = seed ^ (0x9E3779B97F4A7C15ull * (stream + 1));
    return splitmix64_next(s);
}

class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_)
            word = splitmix64_next(sm);
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double next_double() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    // Uniform in [0,n); n must be nonzero.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
    }

    // Uniform integer in [lo, hi], inclusive.
    int next_int(int lo, int hi) {
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo) + 1));
    }

    // Standard normal. Consumes exactly two uniforms; no cached second value.
    double gaussian() {
        const double u1 = 1.0 - next_double(); // (0,1], keeps log finite
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
    }

private:
    static constexpr double kTwoPi = 6.283185307179586476925286766559;

    static uint64_t rotl(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t state_[4];
};

// Round-half-to-even quantization to one byte, clamped to [0,255].
inline uint8_t quantize_u8(double x) {
    if (x <= 0.0)
        return 0;
    if (x >= 255.0)
        return 255;
    const double f = std::floor(x);
    const double frac = x - f;
    double r;
    if (frac > 0.5)
        r = f + 1.0;
    else if (frac < 0.5)
        r = f;
    else
        r = (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
    return static_cast<uint8_t>(r);
}

} // namespace segfuse
