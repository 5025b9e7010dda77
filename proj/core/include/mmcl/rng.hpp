#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace mmcl {

// Deterministic PRNG with named sub-streams. The generator is hand-rolled
// (splitmix64 seeding + xoshiro256** core, Box-Muller normals) so that the
// exact bit stream is part of the engine contract and does not depend on the
// standard library's distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    // Derives an independent stream from a base seed and a label, e.g.
    // Rng::derive(seed, "data-order", task_index).
    static Rng derive(std::uint64_t seed, std::string_view label, std::uint64_t salt = 0) {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the label
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        std::uint64_t x = seed;
        std::uint64_t mixed = splitmix64(x) ^ h;
        std::uint64_t y = salt == 0 ? mixed : salt + 0x9e3779b97f4a7c15ull;
        mixed ^= splitmix64(y);
        return Rng(mixed);
    }

    std::uint64_t next_u64() {
        std::uint64_t* s = state_;
        const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform in [0, n). Rejection-free modulo; bias is < n/2^64, irrelevant
    // for the index ranges used here, and the mapping is fully deterministic.
    std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates permutation of {0, ..., n-1}.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    // k distinct indices drawn uniformly from {0, ..., n-1}.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        auto p = permutation(n);
        p.resize(k);
        return p;
    }

  private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::uint64_t state_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mmcl
