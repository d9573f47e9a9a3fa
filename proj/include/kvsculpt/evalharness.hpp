#pragma once

// Metrics comparing compressed-cache decoding against the full cache on the
// toy model: per-token KL, hidden-state error by layer, and attention-cosine
// of synthetic query proxies at near and far horizons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cachestore.hpp"
#include "numkit.hpp"
#include "queries.hpp"
#include "toymodel.hpp"

namespace kvsculpt {

struct KlStats {
    std::vector<double> per_token;
    double mean = 0.0;
    double max_over_mean = 0.0;
    double top5_fraction = 0.0;
};

/// Concentration statistics of a per-token KL vector.
[[nodiscard]] inline KlStats kl_stats(std::span<const double> per_token)
{
    if (per_token.empty()) { throw std::invalid_argument("kl stats: empty vector"); }
    KlStats s;
    s.per_token.assign(per_token.begin(), per_token.end());
    const double total = std::accumulate(per_token.begin(), per_token.end(), 0.0);
    s.mean = total / static_cast<double>(per_token.size());
    if (total <= 0.0) { return s; }
    std::vector<double> sorted(per_token.begin(), per_token.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    s.max_over_mean = sorted.front() / s.mean;
    const std::size_t top = std::min<std::size_t>(5, sorted.size());
    s.top5_fraction = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), 0.0) / total;
    return s;
}

/// KL(P ‖ Q) for one pair of logit rows.
[[nodiscard]] inline double kl_logits(std::span<const double> p_logits, std::span<const double> q_logits)
{
    if (p_logits.size() != q_logits.size() || p_logits.empty()) { throw std::invalid_argument("kl: shape mismatch"); }
    const double lp = log_sum_exp(p_logits);
    const double lq = log_sum_exp(q_logits);
    double kl = 0.0;
    for (std::size_t i = 0; i < p_logits.size(); ++i) {
        const double logp = p_logits[i] - lp;
        const double logq = q_logits[i] - lq;
        kl += std::exp(logp) * (logp - logq);
    }
    return std::max(kl, 0.0);
}

/// Per-token KL(full ‖ compressed) over softmaxed logits.
[[nodiscard]] inline KlStats kl_report(MatrixView logits_compressed, MatrixView logits_full)
{
    require_same_shape(logits_compressed, logits_full, "kl_report");
    std::vector<double> kl(logits_full.rows());
    for (std::size_t t = 0; t < kl.size(); ++t) { kl[t] = kl_logits(logits_full.row(t), logits_compressed.row(t)); }
    return kl_stats(kl);
}

/// Mean squared hidden-state difference per layer, averaged over decode
/// steps and hidden units.
[[nodiscard]] inline std::vector<double> layer_error_profile(const DecodeResult& full, const DecodeResult& compressed)
{
    if (full.hidden.size() != compressed.hidden.size()) { throw std::invalid_argument("profile: layer count mismatch"); }
    std::vector<double> out;
    for (std::size_t l = 0; l < full.hidden.size(); ++l) {
        require_same_shape(full.hidden[l], compressed.hidden[l], "layer_error_profile");
        Matrix diff = subtract(full.hidden[l], compressed.hidden[l]);
        out.push_back(frobenius_sq(diff) / static_cast<double>(diff.size()));
    }
    return out;
}

[[nodiscard]] inline std::vector<double> layer_error_profile(const ToyModel& model, const KvStack& full,
                                                             const KvStack& compressed,
                                                             std::span<const std::int32_t> continuation,
                                                             std::int64_t start)
{
    return layer_error_profile(decode_teacher_forced(model, full, continuation, start),
                               decode_teacher_forced(model, compressed, continuation, start));
}

/// Content vectors standing in for future queries: (layer, q_head,
/// de-rotated context contents) → proxy contents. Proxy row j is placed at
/// future offset j (cyclically), the same placement used for training.
using ProxyFn = std::function<Matrix(std::size_t layer, std::size_t q_head, MatrixView contents)>;

[[nodiscard]] inline ProxyFn strategy_proxy(QueryStrategy strategy, std::size_t n_synth, std::uint64_t seed)
{
    return [=](std::size_t layer, std::size_t q_head, MatrixView contents) {
        return synthetic_contents(contents, std::min(n_synth, contents.rows()), strategy,
                                  derive_seed(seed, layer, q_head));
    };
}

struct HorizonCosines {
    double near = 0.0;
    double far = 0.0;
};

namespace detail {

inline std::vector<double> attention_row(std::span<const double> q, MatrixView keys)
{
    const double scale = attention_scale(keys.cols());
    std::vector<double> s(keys.rows());
    for (std::size_t j = 0; j < s.size(); ++j) { s[j] = dot(q, keys.row(j)) * scale; }
    const double lse = log_sum_exp(s);
    for (double& v : s) { v = std::exp(v - lse); }
    return s;
}

} // namespace detail

/// Cosine between the mean context-attention row of the true future
/// queries in a window and the mean row of the whole proxy set, proxies
/// placed round-robin on the window's positions. Near window: future offsets [0, window); far window:
/// [far_T − window, far_T). Averaged over layers and query heads.
/// `future_queries[l][qh]` holds RoPE-encoded queries at offsets 0, 1, ….
[[nodiscard]] inline HorizonCosines attn_cosine_horizons(const ModelKvCache& cache,
                                                         const std::vector<std::vector<Matrix>>& future_queries,
                                                         std::size_t window, std::size_t far_t, const ProxyFn& proxy)
{
    const auto& s = cache.shape;
    if (window == 0 || far_t < window) { throw std::invalid_argument("horizons: need 1 ≤ window ≤ far horizon"); }
    if (future_queries.size() != s.num_layers) { throw std::invalid_argument("horizons: layer count mismatch"); }
    const std::size_t n = cache.context_len;
    const std::size_t g = s.group_size();
    HorizonCosines acc;
    std::size_t count = 0;
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        for (std::size_t qh = 0; qh < s.num_q_heads; ++qh) {
            const Matrix& fq = future_queries[l][qh];
            if (fq.rows() < far_t || fq.cols() != s.head_dim) {
                throw std::invalid_argument("horizons: not enough future queries");
            }
            const auto& keys = cache.heads[l][qh / g].keys;
            Matrix contents = rope_invert_rows(cache.queries[l][qh], cache.positions, cache.rope);
            Matrix prox = proxy(l, qh, contents);
            if (prox.rows() == 0 || prox.cols() != s.head_dim) { throw std::invalid_argument("horizons: empty proxy set"); }
            auto window_cos = [&](std::size_t first) {
                std::vector<double> mean_true(n, 0.0);
                std::vector<double> mean_proxy(n, 0.0);
                for (std::size_t off = first; off < first + window; ++off) {
                    auto rt = detail::attention_row(fq.row(off), keys);
                    for (std::size_t j = 0; j < n; ++j) { mean_true[j] += rt[j]; }
                }
                // every proxy, spread over the window's positions
                for (std::size_t p = 0; p < prox.rows(); ++p) {
                    std::vector<double> pq(prox.row(p).begin(), prox.row(p).end());
                    rope_apply_in_place(pq, static_cast<std::int64_t>(n + first + p % window), cache.rope);
                    auto rp = detail::attention_row(pq, keys);
                    for (std::size_t j = 0; j < n; ++j) { mean_proxy[j] += rp[j]; }
                }
                return cosine(mean_true, mean_proxy);
            };
            acc.near += window_cos(0);
            acc.far += window_cos(far_t - window);
            ++count;
        }
    }
    acc.near /= static_cast<double>(count);
    acc.far /= static_cast<double>(count);
    return acc;
}

struct EvalReport {
    double kl_mean = 0.0;
    std::vector<double> kl_per_token;
    std::vector<double> layer_mse_profile;
    double kl_max_over_mean = 0.0;
    double kl_top5_fraction = 0.0;
    double attn_cos_near = 0.0;
    double attn_cos_far = 0.0;
    double layer_compounding = 0.0; ///< last-layer / first-layer hidden MSE (0 when the first is 0)
};

struct EvalOptions {
    std::size_t horizon_window = 8;
    std::size_t far_horizon = 32;
    QueryStrategy strategy = QueryStrategy::uniform;
    std::size_t n_synth = 128;
    std::uint64_t seed = 0;
};

/// Teacher-forced comparison of a compressed cache against the full one
/// over the cache's reference continuation.
[[nodiscard]] inline EvalReport evaluate(const ToyModel& model, const ModelKvCache& full, const KvStack& compressed,
                                         const EvalOptions& opt = {})
{
    if (full.ref_tokens.empty()) { throw std::invalid_argument("eval: cache has no continuation tokens"); }
    std::span<const std::int32_t> cont{full.ref_tokens};
    const auto start = static_cast<std::int64_t>(full.context_len);
    auto dec_full = decode_teacher_forced(model, kv_stack(full), cont, start);
    auto dec_comp = decode_teacher_forced(model, compressed, cont, start);
    EvalReport r;
    auto kl = kl_report(dec_comp.logits, dec_full.logits);
    r.kl_mean = kl.mean;
    r.kl_per_token = kl.per_token;
    r.kl_max_over_mean = kl.max_over_mean;
    r.kl_top5_fraction = kl.top5_fraction;
    r.layer_mse_profile = layer_error_profile(dec_full, dec_comp);
    if (r.layer_mse_profile.front() > 0.0) { r.layer_compounding = r.layer_mse_profile.back() / r.layer_mse_profile.front(); }
    const std::size_t far = std::min(opt.far_horizon, cont.size());
    const std::size_t window = std::min(opt.horizon_window, far);
    auto cos = attn_cosine_horizons(full, dec_full.queries, window, far, strategy_proxy(opt.strategy, opt.n_synth, opt.seed));
    r.attn_cos_near = cos.near;
    r.attn_cos_far = cos.far;
    return r;
}

[[nodiscard]] inline nlohmann::json to_json(const EvalReport& r)
{
    return {{"kl_mean", r.kl_mean},
            {"kl_per_token", r.kl_per_token},
            {"layer_mse_profile", r.layer_mse_profile},
            {"kl_max_over_mean", r.kl_max_over_mean},
            {"kl_top5_fraction", r.kl_top5_fraction},
            {"attn_cos_near", r.attn_cos_near},
            {"attn_cos_far", r.attn_cos_far},
            {"layer_compounding", r.layer_compounding}};
}

/// CSV series for plotting: per-token KL, then the layer profile.
[[nodiscard]] inline std::string plot_csv(const EvalReport& r)
{
    std::ostringstream os;
    os.precision(17);
    os << "series,index,value\n";
    for (std::size_t i = 0; i < r.kl_per_token.size(); ++i) { os << "kl_per_token," << i << ',' << r.kl_per_token[i] << '\n'; }
    for (std::size_t i = 0; i < r.layer_mse_profile.size(); ++i) {
        os << "layer_mse," << i << ',' << r.layer_mse_profile[i] << '\n';
    }
    return os.str();
}

} // namespace kvsculpt
