#pragma once

// In-memory data model for full and compressed KV caches and the zone split.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "attention.hpp"
#include "numkit.hpp"
#include "rope.hpp"

namespace kvsculpt {

/// One KV head's cache: RoPE-encoded keys, values and token positions.
struct HeadCache {
    Matrix keys;   // N × d
    Matrix values; // N × d
    std::vector<std::int64_t> positions;

    [[nodiscard]] std::size_t size() const noexcept { return keys.rows(); }

    void validate() const
    {
        if (keys.rows() != values.rows() || keys.rows() != positions.size() || keys.cols() != values.cols()) {
            throw std::invalid_argument("head cache: keys/values/positions shape mismatch");
        }
        for (std::size_t i = 1; i < positions.size(); ++i) {
            if (positions[i] <= positions[i - 1]) {
                throw std::invalid_argument("head cache: positions must be strictly increasing");
            }
        }
    }
};

/// Views into a HeadCache: the compress zone (oldest N − m rows) and the
/// retain zone (newest m rows). Must not outlive the cache it views.
struct ZoneSplit {
    MatrixView old_keys;
    MatrixView old_values;
    MatrixView retain_keys;
    MatrixView retain_values;
    std::span<const std::int64_t> old_positions;
    std::span<const std::int64_t> retain_positions;
    MatrixView full_keys;
    MatrixView full_values;

    [[nodiscard]] std::size_t old_size() const noexcept { return old_keys.rows(); }
    [[nodiscard]] std::size_t retain_size() const noexcept { return retain_keys.rows(); }
    [[nodiscard]] std::size_t head_dim() const noexcept { return full_keys.cols(); }
};

[[nodiscard]] inline ZoneSplit split_zones(const HeadCache& cache, std::size_t m)
{
    const std::size_t n = cache.size();
    if (m == 0 || m >= n) { throw std::invalid_argument("invalid retain size"); }
    const std::size_t old = n - m;
    ZoneSplit z;
    z.full_keys = cache.keys.view();
    z.full_values = cache.values.view();
    z.old_keys = z.full_keys.row_block(0, old);
    z.old_values = z.full_values.row_block(0, old);
    z.retain_keys = z.full_keys.row_block(old, m);
    z.retain_values = z.full_values.row_block(old, m);
    std::span<const std::int64_t> pos{cache.positions};
    z.old_positions = pos.first(old);
    z.retain_positions = pos.subspan(old);
    return z;
}

/// r = (k + m) / N
[[nodiscard]] inline double compression_ratio(std::size_t k, std::size_t m, std::size_t n)
{
    if (n == 0) { throw std::invalid_argument("compression_ratio: empty context"); }
    if (m == 0 || m > n) { throw std::invalid_argument("compression_ratio: retain size must be in (0, N]"); }
    return static_cast<double>(k + m) / static_cast<double>(n);
}

/// Per-head budget k for a target ratio under uniform allocation:
/// floor(r·N) − m, so that (k + m)/N never exceeds r.
[[nodiscard]] inline std::size_t uniform_budget(double ratio, std::size_t m, std::size_t n)
{
    if (n == 0 || m == 0 || m >= n) { throw std::invalid_argument("uniform_budget: need 0 < m < N"); }
    if (!(ratio > 0.0) || ratio > 1.0) { throw std::invalid_argument("uniform_budget: ratio must lie in (0, 1]"); }
    const auto kept = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
    const std::int64_t k = kept - static_cast<std::int64_t>(m);
    if (k < 1) {
        throw std::invalid_argument("ratio " + std::to_string(ratio) + " leaves no room beyond the retain zone");
    }
    return static_cast<std::size_t>(k);
}

/// Distilled (or selected) pairs plus the untouched retain zone of one KV head.
struct CompressedHead {
    Matrix k_c;   // k × d
    Matrix v_c;   // k × d
    Matrix k_ret; // m × d
    Matrix v_ret; // m × d
    std::vector<std::int64_t> retain_positions;

    [[nodiscard]] std::size_t k() const noexcept { return k_c.rows(); }
    [[nodiscard]] std::size_t m() const noexcept { return k_ret.rows(); }
    [[nodiscard]] Matrix keys() const { return vstack(k_c, k_ret); }
    [[nodiscard]] Matrix values() const { return vstack(v_c, v_ret); }

    void validate() const
    {
        if (k_c.rows() == 0) { throw std::invalid_argument("compressed head: k must be at least 1"); }
        if (k_c.rows() != v_c.rows() || k_ret.rows() != v_ret.rows() || k_c.cols() != v_c.cols()
            || k_c.cols() != k_ret.cols() || k_ret.cols() != v_ret.cols() || retain_positions.size() != k_ret.rows()) {
            throw std::invalid_argument("compressed head: shape mismatch");
        }
        for (const Matrix* m : {&k_c, &v_c, &k_ret, &v_ret}) {
            if (!all_finite(m->flat())) { throw std::invalid_argument("compressed head: non-finite entry"); }
        }
    }
};

/// Retain zone copied out of a split, with an empty compressed part.
[[nodiscard]] inline CompressedHead make_compressed(const ZoneSplit& zone, Matrix k_c, Matrix v_c)
{
    CompressedHead h{std::move(k_c), std::move(v_c), Matrix(zone.retain_keys), Matrix(zone.retain_values),
                     std::vector<std::int64_t>(zone.retain_positions.begin(), zone.retain_positions.end())};
    h.validate();
    return h;
}

/// Full prefill cache of a model: per-layer per-KV-head caches, per-layer
/// per-query-head queries and optional teacher-forcing references.
struct ModelKvCache {
    ModelShape shape;
    RopeConfig rope;
    std::string grouping = "contiguous";
    std::size_t context_len = 0;
    std::vector<std::int64_t> positions;
    std::vector<std::vector<HeadCache>> heads; // [layer][kv_head]
    std::vector<std::vector<Matrix>> queries;  // [layer][q_head], N × d each
    std::optional<Matrix> ref_logits;          // T × vocab
    std::vector<std::int32_t> ref_tokens;      // T
    nlohmann::json extra = nlohmann::json::object();

    void validate() const
    {
        shape.validate();
        rope.validate();
        if (rope.head_dim != shape.head_dim) { throw std::invalid_argument("cache: rope head_dim differs from shape"); }
        if (grouping != "contiguous") { throw std::invalid_argument("cache: unsupported query grouping " + grouping); }
        if (positions.size() != context_len) { throw std::invalid_argument("cache: positions length != context_len"); }
        if (heads.size() != shape.num_layers || queries.size() != shape.num_layers) {
            throw std::invalid_argument("cache: layer count mismatch");
        }
        for (std::size_t l = 0; l < shape.num_layers; ++l) {
            if (heads[l].size() != shape.num_kv_heads || queries[l].size() != shape.num_q_heads) {
                throw std::invalid_argument("cache: head count mismatch in layer " + std::to_string(l));
            }
            for (const auto& h : heads[l]) {
                h.validate();
                if (h.size() != context_len || h.keys.cols() != shape.head_dim || h.positions != positions) {
                    throw std::invalid_argument("cache: heads must share N and positions");
                }
            }
            for (const auto& q : queries[l]) {
                if (q.rows() != context_len || q.cols() != shape.head_dim) {
                    throw std::invalid_argument("cache: query matrix shape mismatch");
                }
            }
        }
        if (ref_logits && ref_logits->rows() != ref_tokens.size()) {
            throw std::invalid_argument("cache: reference logits and tokens disagree on T");
        }
    }
};

/// A compressed model cache: one CompressedHead per (layer, kv head).
struct CompressedKvCache {
    ModelShape shape;
    RopeConfig rope;
    std::string grouping = "contiguous";
    std::size_t context_len = 0;
    std::size_t retain = 0;
    std::vector<std::int64_t> positions; // original context positions
    std::vector<std::vector<CompressedHead>> heads;
    nlohmann::json extra = nlohmann::json::object();

    [[nodiscard]] std::size_t total_budget() const
    {
        std::size_t b = 0;
        for (const auto& layer : heads) {
            for (const auto& h : layer) { b += h.k(); }
        }
        return b;
    }

    void validate() const
    {
        shape.validate();
        rope.validate();
        if (heads.size() != shape.num_layers) { throw std::invalid_argument("compressed cache: layer count mismatch"); }
        for (const auto& layer : heads) {
            if (layer.size() != shape.num_kv_heads) {
                throw std::invalid_argument("compressed cache: head count mismatch");
            }
            for (const auto& h : layer) {
                h.validate();
                if (h.m() != retain || h.k_c.cols() != shape.head_dim) {
                    throw std::invalid_argument("compressed cache: head shape mismatch");
                }
            }
        }
    }
};

/// Per-layer per-KV-head (keys, values) as consumed by the decoder.
struct LayerKv {
    Matrix keys;
    Matrix values;
};
using KvStack = std::vector<std::vector<LayerKv>>;

[[nodiscard]] inline KvStack kv_stack(const ModelKvCache& c)
{
    KvStack out(c.heads.size());
    for (std::size_t l = 0; l < c.heads.size(); ++l) {
        for (const auto& h : c.heads[l]) { out[l].push_back({h.keys, h.values}); }
    }
    return out;
}

[[nodiscard]] inline KvStack kv_stack(const CompressedKvCache& c)
{
    KvStack out(c.heads.size());
    for (std::size_t l = 0; l < c.heads.size(); ++l) {
        for (const auto& h : c.heads[l]) { out[l].push_back({h.keys(), h.values()}); }
    }
    return out;
}

} // namespace kvsculpt
