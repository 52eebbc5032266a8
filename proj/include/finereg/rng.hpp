#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace finereg {

// Counter-style RNG built on splitmix64. Every consumer derives its own
// stream from (seed, tag, index), so adding a new consumer never shifts
// the draws of an existing one.
class Rng {
public:
    static std::uint64_t hash_tag(std::string_view tag) {
        std::uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
        for (unsigned char c : tag) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    static Rng stream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
        Rng r;
        r.state_ = mix(mix(mix(seed) ^ hash_tag(tag)) ^ index);
        return r;
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

    // Box-Muller; draws two uniforms per call, no caching so the stream
    // position is a pure function of call count.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_ = 0;
};

} // namespace finereg
