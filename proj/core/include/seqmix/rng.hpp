#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace seqmix {

/// Deterministic xoshiro256** generator.
///
/// std::mt19937 plus the standard distributions produce implementation-defined
/// streams, which breaks bit-identical checkpoint resume across toolchains.
/// This generator and the distributions below are fully pinned down and the
/// whole state serializes to a short hex string.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ULL) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        // splitmix64 expansion of the seed into the four state words
        std::uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    /// Integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per draw so the
    /// stream has no hidden cached-spare state.
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    /// Derive an independent child generator; advances this stream by one draw.
    Rng split() { return Rng(next_u64()); }

    /// Four state words as fixed-width hex, e.g. for checkpoint headers.
    std::string save_state() const {
        static const char* digits = "0123456789abcdef";
        std::string out;
        out.reserve(64);
        for (auto word : state_) {
            for (int shift = 60; shift >= 0; shift -= 4) out += digits[(word >> shift) & 0xf];
        }
        return out;
    }

    void load_state(const std::string& hex) {
        if (hex.size() != 64) throw std::invalid_argument("Rng::load_state: expected 64 hex chars");
        for (int w = 0; w < 4; ++w) {
            std::uint64_t v = 0;
            for (int i = 0; i < 16; ++i) {
                const char c = hex[static_cast<std::size_t>(w * 16 + i)];
                std::uint64_t nibble;
                if (c >= '0' && c <= '9') nibble = static_cast<std::uint64_t>(c - '0');
                else if (c >= 'a' && c <= 'f') nibble = static_cast<std::uint64_t>(c - 'a' + 10);
                else throw std::invalid_argument("Rng::load_state: bad hex char");
                v = (v << 4) | nibble;
            }
            state_[w] = v;
        }
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
};

}  // namespace seqmix
