#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>

namespace grounddiff {

// splitmix64, used for seeding and for deriving per-record / per-step streams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
    return splitmix64(s);
}

// xoshiro256** by Blackman & Vigna. Chosen over std::mt19937_64 +
// std::*_distribution because the standard distributions are
// implementation-defined; this generator plus the explicit transforms
// below give bit-identical streams on every platform, and the 4-word
// state serializes trivially into checkpoints.
class Rng {
public:
    Rng() : Rng(0x853c49e6748fea9bULL) {}

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

    // Uniform in [0, 1). 53 significant bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n > 0. Modulo bias is irrelevant at the
    // n << 2^64 sizes used here and keeps the draw count deterministic.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller. Stateless between calls (the second
    // value of the pair is discarded) so the stream position is always
    // exactly two u64 draws per normal.
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
};

}  // namespace grounddiff
