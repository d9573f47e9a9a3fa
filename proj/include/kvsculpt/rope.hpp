#pragma once

// Rotary position embeddings: apply at a position and invert exactly.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "numkit.hpp"

namespace kvsculpt {

/// How dimensions are paired for rotation.
enum class RopePairing {
    interleaved, ///< pairs (2i, 2i+1)
    half_split,  ///< pairs (i, i + d/2)
};

[[nodiscard]] inline std::string_view to_string(RopePairing p) noexcept
{
    return p == RopePairing::interleaved ? "interleaved" : "half_split";
}

[[nodiscard]] inline RopePairing parse_pairing(std::string_view s)
{
    if (s == "interleaved") { return RopePairing::interleaved; }
    if (s == "half_split" || s == "half-split") { return RopePairing::half_split; }
    throw std::invalid_argument("unknown rope pairing: " + std::string{s});
}

struct RopeConfig {
    std::size_t head_dim = 16;
    double theta_base = 10000.0;
    RopePairing pairing = RopePairing::interleaved;

    void validate() const
    {
        if (head_dim == 0 || head_dim % 2 != 0) { throw std::invalid_argument("rope: head_dim must be even and positive"); }
        if (!(theta_base > 0.0) || !std::isfinite(theta_base)) { throw std::invalid_argument("rope: theta_base must be positive"); }
    }

    /// θ_i = base^(−2i/d)
    [[nodiscard]] double frequency(std::size_t i) const
    {
        return std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }

    friend bool operator==(const RopeConfig&, const RopeConfig&) = default;
};

namespace detail {

inline void rope_rotate(std::span<double> x, double position, const RopeConfig& cfg)
{
    if (x.size() != cfg.head_dim) {
        throw std::invalid_argument("rope: vector has dim " + std::to_string(x.size()) + ", expected "
                                    + std::to_string(cfg.head_dim));
    }
    const std::size_t half = cfg.head_dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double angle = position * cfg.frequency(i);
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const std::size_t a = cfg.pairing == RopePairing::interleaved ? 2 * i : i;
        const std::size_t b = cfg.pairing == RopePairing::interleaved ? 2 * i + 1 : i + half;
        const double xa = x[a];
        const double xb = x[b];
        x[a] = xa * c - xb * s;
        x[b] = xa * s + xb * c;
    }
}

} // namespace detail

/// Rotate every dimension pair by position·θ_i.
[[nodiscard]] inline std::vector<double> rope_apply(std::span<const double> x, std::int64_t position,
                                                    const RopeConfig& cfg)
{
    std::vector<double> out(x.begin(), x.end());
    detail::rope_rotate(out, static_cast<double>(position), cfg);
    return out;
}

/// Undo rope_apply at the same position.
[[nodiscard]] inline std::vector<double> rope_invert(std::span<const double> x, std::int64_t position,
                                                     const RopeConfig& cfg)
{
    std::vector<double> out(x.begin(), x.end());
    detail::rope_rotate(out, -static_cast<double>(position), cfg);
    return out;
}

inline void rope_apply_in_place(std::span<double> x, std::int64_t position, const RopeConfig& cfg)
{
    detail::rope_rotate(x, static_cast<double>(position), cfg);
}

inline void rope_invert_in_place(std::span<double> x, std::int64_t position, const RopeConfig& cfg)
{
    detail::rope_rotate(x, -static_cast<double>(position), cfg);
}

/// De-rotate each row of `rows` at its own position, giving content vectors.
[[nodiscard]] inline Matrix rope_invert_rows(MatrixView rows, std::span<const std::int64_t> positions,
                                             const RopeConfig& cfg)
{
    if (positions.size() != rows.rows()) { throw std::invalid_argument("rope: positions/rows length mismatch"); }
    Matrix out(rows);
    for (std::size_t r = 0; r < out.rows(); ++r) { rope_invert_in_place(out.row(r), positions[r], cfg); }
    return out;
}

} // namespace kvsculpt
