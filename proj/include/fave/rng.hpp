#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "fave/common.hpp"

namespace fave {

// xoshiro256++ with splitmix64 seeding. All distributions are implemented
// here so sampled streams are identical across platforms and standard
// libraries; generator state serializes into checkpoints.
struct Rng {
    std::array<u64, 4> s{};

    static u64 splitmix64(u64& x) {
        x += 0x9e3779b97f4a7c15ULL;
        u64 z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    explicit Rng(u64 seed = 0) { reseed(seed); }

    void reseed(u64 seed) {
        u64 x = seed;
        for (auto& w : s) w = splitmix64(x);
    }

    static u64 rotl(u64 x, int k) { return (x << k) | (x >> (64 - k)); }

    u64 next() {
        u64 result = rotl(s[0] + s[3], 23) + s[0];
        u64 t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform on [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform on (0,1): rejects the single zero outcome.
    double uniform_open() {
        for (;;) {
            double u = uniform();
            if (u > 0.0) return u;
        }
    }

    // Uniform on (0,1].
    double uniform_open_closed() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

    // Box-Muller, cosine branch only; two raw draws per sample keeps the
    // state trajectory independent of call parity.
    double normal() {
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Unbiased integer in [0, n) by rejection.
    u64 below(u64 n) {
        if (n == 0) throw Error("rng: below(0)");
        u64 threshold = (0 - n) % n;
        for (;;) {
            u64 r = next();
            if (r >= threshold) return r % n;
        }
    }

    // Independent child stream keyed on (current seed material, tag). Used
    // for per-user evaluation draws so results do not depend on traversal
    // order or thread assignment.
    Rng derive(u64 tag) const {
        u64 x = s[0] ^ rotl(s[2], 29) ^ (tag * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
        Rng child(0);
        for (auto& w : child.s) w = splitmix64(x);
        return child;
    }

    std::array<u64, 4> state() const { return s; }
    void set_state(const std::array<u64, 4>& st) { s = st; }
};

}  // namespace fave
