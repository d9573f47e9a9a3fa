#pragma once

// Eviction baselines: keep k original compress-zone pairs, optionally refit
// their values.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cachestore.hpp"
#include "distiller.hpp"
#include "queries.hpp"
#include "rng.hpp"

namespace kvsculpt {

enum class Method { random, attn, selectfit, kvsculpt };

[[nodiscard]] inline std::string_view to_string(Method m) noexcept
{
    switch (m) {
    case Method::random: return "random";
    case Method::attn: return "attn";
    case Method::selectfit: return "selectfit";
    case Method::kvsculpt: return "kvsculpt";
    }
    return "kvsculpt";
}

[[nodiscard]] inline Method parse_method(std::string_view s)
{
    for (auto m : {Method::random, Method::attn, Method::selectfit, Method::kvsculpt}) {
        if (s == to_string(m)) { return m; }
    }
    throw std::invalid_argument("unknown method: " + std::string{s});
}

inline void require_budget(const ZoneSplit& zone, std::size_t k)
{
    if (k == 0) { throw std::invalid_argument("budget must be at least 1"); }
    if (k > zone.old_size()) { throw std::invalid_argument("budget exceeds zone"); }
}

/// Compress-zone rows chosen uniformly without replacement.
[[nodiscard]] inline std::vector<std::size_t> random_subset(std::size_t zone_size, std::size_t k, std::uint64_t seed)
{
    Rng rng{seed};
    auto idx = rng.sample_without_replacement(zone_size, k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

[[nodiscard]] inline CompressedHead keep_rows(const ZoneSplit& zone, const std::vector<std::size_t>& idx)
{
    return make_compressed(zone, gather_rows(zone.old_keys, idx), gather_rows(zone.old_values, idx));
}

[[nodiscard]] inline CompressedHead evict_random(const ZoneSplit& zone, std::size_t k, std::uint64_t seed)
{
    require_budget(zone, k);
    return keep_rows(zone, random_subset(zone.old_size(), k, seed));
}

[[nodiscard]] inline CompressedHead evict_attn_score(const ZoneSplit& zone, const QuerySet& queries, std::size_t k)
{
    require_budget(zone, k);
    auto init = init_keys_topk(zone, queries, k);
    return make_compressed(zone, std::move(init.k_c), std::move(init.v_c));
}

/// Values of the given compress-zone keys refit by ridge regression.
[[nodiscard]] inline CompressedHead fit_values(const ZoneSplit& zone, const QuerySet& queries,
                                               const AttentionTarget& target, const std::vector<std::size_t>& idx,
                                               double lambda_ridge)
{
    Matrix k_c = gather_rows(zone.old_keys, idx);
    auto views = queries.views();
    auto w = attention_weights(views, k_c, zone.retain_keys);
    Matrix v_c = solve_values(w, zone.retain_values, stacked_targets(target), lambda_ridge);
    return make_compressed(zone, std::move(k_c), std::move(v_c));
}

[[nodiscard]] inline CompressedHead select_and_fit(const ZoneSplit& zone, const QuerySet& queries,
                                                   const AttentionTarget& target, std::size_t k, double lambda_ridge)
{
    require_budget(zone, k);
    auto views = queries.views();
    return fit_values(zone, queries, target, top_k_indices(attention_importance(zone, views), k), lambda_ridge);
}

/// Distillation loss of a compressed head on the training queries.
[[nodiscard]] inline LossParts head_loss(const CompressedHead& head, const QuerySet& queries,
                                         const AttentionTarget& target, double lambda_lse)
{
    auto views = queries.views();
    HeadObjective obj(views, head.k_ret, head.v_ret, target, lambda_lse);
    obj.set_values(head.v_c);
    return obj.parts(head.k_c.flat());
}

struct MethodResult {
    CompressedHead head;
    DistillTrace trace; // empty for eviction baselines
};

/// Dispatch on the method selector for one head.
[[nodiscard]] inline MethodResult compress_head(Method method, const HeadProblem& p, std::size_t k,
                                                const DistillConfig& cfg)
{
    // A budget covering the whole zone keeps it verbatim: lossless.
    if (k == p.zone->old_size()) {
        std::vector<std::size_t> all(k);
        for (std::size_t i = 0; i < k; ++i) { all[i] = i; }
        return {keep_rows(*p.zone, all), {}};
    }
    switch (method) {
    case Method::random: return {evict_random(*p.zone, k, cfg.seed), {}};
    case Method::attn: return {evict_attn_score(*p.zone, *p.queries, k), {}};
    case Method::selectfit: return {select_and_fit(*p.zone, *p.queries, *p.target, k, cfg.lambda_ridge), {}};
    case Method::kvsculpt: {
        auto r = distill_head(p, k, cfg);
        return {std::move(r.head), std::move(r.trace)};
    }
    }
    throw std::invalid_argument("unknown method");
}

} // namespace kvsculpt
