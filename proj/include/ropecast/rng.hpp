#pragma once

#include <cmath>
#include <cstdint>

namespace ropecast {

// SplitMix64 generator (Steele, Lea, Vigna). Chosen over std:: engines because
// the uniform/normal transforms below are fully specified here, so streams are
// identical on every platform for a given integer seed.
struct Rng {
    uint64_t state = 0x9e3779b97f4a7c15ull;
    bool have_cached_normal = false;
    double cached_normal = 0.0;

    Rng() = default;
    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; used where log(u) must stay finite.
    double next_uniform_pos() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; the pair's second value is cached.
    double next_normal() {
        if (have_cached_normal) {
            have_cached_normal = false;
            return cached_normal;
        }
        const double u1 = next_uniform_pos();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_normal = r * std::sin(a);
        have_cached_normal = true;
        return r * std::cos(a);
    }

    // Unbiased integer in [0, n) by rejection.
    uint64_t next_below(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t x = next_u64();
            if (x >= threshold) return x % n;
        }
    }
};

// Stateless stream derivation: mixes a base seed with stream/index tags so
// per-element RNGs are independent of iteration order.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t index = 0) {
    Rng r(seed ^ (0xd1342543de82ef95ull * (stream + 1)) ^ (0xaf251af3b0f025b5ull * (index + 1)));
    return r.next_u64();
}

// FNV-1a over raw bytes; used for config fingerprints and file checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace ropecast
