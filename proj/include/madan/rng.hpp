#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <cmath>

namespace madan::rng {

// SplitMix64 (Steele, Lea, Vigna). State advances by a fixed odd constant,
// the output is a bijective mix of the state, so the stream is equivalent
// to a counter-based generator: output(i) = mix(seed + i * GAMMA).
// This is the generator named "splitmix64" in dataset manifests; ports in
// other languages must reproduce it bit-exactly.
class SplitMix64 {
public:
    static constexpr std::uint64_t GAMMA = 0x9E3779B97F4A7C15ull;

    SplitMix64() : state_(0) {}
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += GAMMA;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double next_range(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny compared to 2^64, the bias is < n/2^64.
    std::uint64_t next_below(std::uint64_t n) {
        return n ? next_u64() % n : 0;
    }

    // Standard normal via Box-Muller. Stateless across calls (no cached
    // second value) so serialization of `state_` captures everything.
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

// FNV-1a over bytes; used for stream derivation and file fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64_u64(std::uint64_t v, std::uint64_t h = 1469598103934665603ull) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (i * 8)) & 0xFFu;
        h *= 1099511628211ull;
    }
    return h;
}

// Derives an independent named substream from (seed, tag). Two distinct tags
// give unrelated streams for the same seed.
inline SplitMix64 substream(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = fnv1a64(tag);
    std::uint64_t z = seed ^ h;
    // one extra mix so that seed deltas do not map linearly onto state deltas
    SplitMix64 boot(z);
    return SplitMix64(boot.next_u64());
}

} // namespace madan::rng
