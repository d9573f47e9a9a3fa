#pragma once

// Whole-model compression: prepare every (layer, kv head) problem and run the
// selected method on each under a deterministic parallel map.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "baselines.hpp"
#include "cachestore.hpp"
#include "distiller.hpp"
#include "parallel.hpp"
#include "queries.hpp"
#include "rng.hpp"

namespace kvsculpt {

/// Training data for one KV head. Views into the source cache, which must
/// outlive it.
struct PreparedHead {
    ZoneSplit zone;
    QuerySet queries;
    AttentionTarget target;

    [[nodiscard]] HeadProblem problem() const { return {&zone, &queries, &target}; }
};

/// Seed for the task at (layer, kv head).
[[nodiscard]] inline std::uint64_t task_seed(std::uint64_t seed, std::size_t layer, std::size_t head) noexcept
{
    return derive_seed(seed, layer, head);
}

[[nodiscard]] inline std::unique_ptr<PreparedHead> prepare_head(const ModelKvCache& cache, std::size_t layer,
                                                                std::size_t kv_head, std::size_t m,
                                                                std::size_t n_synth, QueryStrategy strategy,
                                                                std::uint64_t seed)
{
    if (layer >= cache.shape.num_layers) { throw std::out_of_range("layer out of range"); }
    auto p = std::make_unique<PreparedHead>();
    p->zone = split_zones(cache.heads[layer][kv_head], m);
    auto ctx = gqa_expand(cache.shape, cache.queries[layer], kv_head);
    p->queries = build_training_queries(ctx, cache.positions, cache.context_len, m, n_synth, cache.rope, strategy,
                                        seed);
    p->target = attention_targets(p->zone, p->queries);
    return p;
}

/// Per-(layer, head) budget matrix.
using BudgetGrid = std::vector<std::vector<std::size_t>>;

[[nodiscard]] inline BudgetGrid uniform_grid(const ModelShape& shape, std::size_t k)
{
    return BudgetGrid(shape.num_layers, std::vector<std::size_t>(shape.num_kv_heads, k));
}

struct CompressOptions {
    Method method = Method::kvsculpt;
    std::size_t retain = 32;
    QueryStrategy strategy = QueryStrategy::uniform;
    DistillConfig distill{};
    std::size_t threads = 0; ///< 0: KVSCULPT_THREADS or hardware concurrency
};

struct HeadOutcome {
    LossParts loss;
    DistillTrace trace;
    std::size_t k = 0;
};

struct CompressedModel {
    CompressedKvCache cache;
    std::vector<std::vector<HeadOutcome>> heads; // [layer][kv_head]
};

[[nodiscard]] inline CompressedModel compress_model(const ModelKvCache& cache, const BudgetGrid& budgets,
                                                    const CompressOptions& opt)
{
    cache.validate();
    const auto& shape = cache.shape;
    if (budgets.size() != shape.num_layers) { throw std::invalid_argument("budget grid: layer count mismatch"); }
    for (const auto& row : budgets) {
        if (row.size() != shape.num_kv_heads) { throw std::invalid_argument("budget grid: head count mismatch"); }
    }
    const std::size_t h_kv = shape.num_kv_heads;
    CompressedModel out;
    out.cache.shape = shape;
    out.cache.rope = cache.rope;
    out.cache.grouping = cache.grouping;
    out.cache.context_len = cache.context_len;
    out.cache.retain = opt.retain;
    out.cache.positions = cache.positions;
    out.cache.extra = cache.extra;
    out.cache.heads.assign(shape.num_layers, std::vector<CompressedHead>(h_kv));
    out.heads.assign(shape.num_layers, std::vector<HeadOutcome>(h_kv));

    parallel_for(
        shape.num_layers * h_kv,
        [&](std::size_t task) {
            const std::size_t l = task / h_kv;
            const std::size_t h = task % h_kv;
            DistillConfig cfg = opt.distill;
            cfg.seed = task_seed(opt.distill.seed, l, h);
            auto prep = prepare_head(cache, l, h, opt.retain, cfg.n_synth, opt.strategy, cfg.seed);
            auto res = compress_head(opt.method, prep->problem(), budgets[l][h], cfg);
            HeadOutcome o;
            o.loss = head_loss(res.head, prep->queries, prep->target, cfg.lambda_lse);
            o.trace = std::move(res.trace);
            o.k = budgets[l][h];
            out.cache.heads[l][h] = std::move(res.head);
            out.heads[l][h] = std::move(o);
        },
        opt.threads);
    return out;
}

} // namespace kvsculpt
