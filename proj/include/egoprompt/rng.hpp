#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace egoprompt {

/// splitmix64 step. Fully specified, so streams are bit-identical across
/// platforms and standard libraries (std::uniform_*_distribution is not).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Deterministic random stream seeded from a 64-bit value.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (two uniforms per draw, no cache).
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    /// Child stream keyed by a name, independent of draw order on the parent.
    Rng fork(std::string_view tag) const {
        std::uint64_t s = state_ ^ (0x6a09e667f3bcc909ULL + fnv1a64(tag));
        return Rng(splitmix64(s));
    }

    Rng fork(std::string_view tag, std::uint64_t index) const {
        std::uint64_t s = state_ ^ (0xbb67ae8584caa73bULL + fnv1a64(tag)) ^ (index * 0x9e3779b97f4a7c15ULL + 0x1234abcd5678ef01ULL);
        return Rng(splitmix64(s));
    }

private:
    std::uint64_t state_;
};

}  // namespace egoprompt
