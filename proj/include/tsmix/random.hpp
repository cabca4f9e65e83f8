// Seeded random streams. Every stochastic component of a run (init,
// shuffling, augmentation draws, dropout masks) owns its own stream so the
// streams can be consumed independently without desynchronizing each other.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "tsmix/errors.hpp"

namespace tsmix {

namespace detail {

// splitmix64; used only to derive well-separated child seeds.
inline std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace detail

class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    // Child stream for an independent purpose; `tag` distinguishes siblings.
    static RandomStream derive(std::uint64_t seed, std::uint64_t tag) {
        return RandomStream(detail::mix_seed(detail::mix_seed(seed) ^ tag));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double sd = 1.0) {
        return std::normal_distribution<double>(mean, sd)(engine_);
    }

    double gamma(double alpha) {
        if (alpha <= 0.0) throw ConfigError("gamma draw requires alpha > 0");
        return std::gamma_distribution<double>(alpha, 1.0)(engine_);
    }

    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), engine_);
        return perm;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace tsmix
