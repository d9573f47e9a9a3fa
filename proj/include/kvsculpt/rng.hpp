#pragma once

// Seeded randomness with platform-independent draws. The standard
// distributions are implementation-defined, so bounded integers and normals
// are derived here directly from mt19937_64 output.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace kvsculpt {

[[nodiscard]] constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Per-task seed: (seed, layer, head) → task seed.
[[nodiscard]] constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept
{
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ (a + 0x632be59bd9b4e019ULL));
    h = splitmix64(h ^ (b + 0x8cb92ba72f3d8dd7ULL));
    return h;
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_{splitmix64(seed)} {}

    [[nodiscard]] std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    [[nodiscard]] double uniform()
    {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n), rejection sampled.
    [[nodiscard]] std::uint64_t below(std::uint64_t n)
    {
        if (n == 0) { throw std::invalid_argument("Rng::below: empty range"); }
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
        std::uint64_t x = 0;
        do { x = engine_(); } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (the cosine branch only).
    [[nodiscard]] double normal()
    {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// k distinct indices from [0, n), drawn by partial Fisher-Yates, in draw order.
    [[nodiscard]] std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k)
    {
        if (k > n) { throw std::invalid_argument("Rng::sample_without_replacement: k > n"); }
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) { pool[i] = i; }
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = i + static_cast<std::size_t>(below(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

  private:
    std::mt19937_64 engine_;
};

} // namespace kvsculpt
