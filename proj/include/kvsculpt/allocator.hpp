#pragma once

// Budget allocation across layers and KV heads from a pilot difficulty signal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pipeline.hpp"

namespace kvsculpt {

enum class AllocPolicy { uniform, layer, head };

[[nodiscard]] inline std::string_view to_string(AllocPolicy p) noexcept
{
    switch (p) {
    case AllocPolicy::uniform: return "uniform";
    case AllocPolicy::layer: return "layer";
    case AllocPolicy::head: return "head";
    }
    return "uniform";
}

[[nodiscard]] inline AllocPolicy parse_alloc_policy(std::string_view s)
{
    for (auto p : {AllocPolicy::uniform, AllocPolicy::layer, AllocPolicy::head}) {
        if (s == to_string(p)) { return p; }
    }
    throw std::invalid_argument("unknown allocation policy: " + std::string{s});
}

/// Default pilot length per policy.
[[nodiscard]] inline std::size_t default_pilot_steps(AllocPolicy p) noexcept
{
    return p == AllocPolicy::head ? 30 : 60;
}

struct PilotReport {
    std::vector<std::vector<double>> mse; // [layer][kv_head]
    std::size_t pilot_steps = 0;
    std::size_t uniform_k = 0;
    std::size_t context_len = 0;
    std::size_t retain = 0;

    [[nodiscard]] std::size_t num_layers() const noexcept { return mse.size(); }
    [[nodiscard]] std::size_t num_heads() const noexcept { return mse.empty() ? 0 : mse.front().size(); }
    [[nodiscard]] std::size_t head_cap() const noexcept { return context_len - retain; }

    void validate() const
    {
        if (mse.empty() || mse.front().empty()) { throw std::invalid_argument("pilot report: empty"); }
        for (const auto& row : mse) {
            if (row.size() != mse.front().size()) { throw std::invalid_argument("pilot report: ragged mse grid"); }
            for (double v : row) {
                if (!(v >= 0.0) || !std::isfinite(v)) {
                    throw std::invalid_argument("pilot report: mse must be finite and non-negative");
                }
            }
        }
        if (retain == 0 || retain >= context_len) { throw std::invalid_argument("pilot report: invalid retain size"); }
    }
};

struct BudgetPlan {
    BudgetGrid k;
    std::size_t total = 0;
    double alpha = 0.0;
    std::size_t k_min_floor = 4;
    AllocPolicy policy = AllocPolicy::uniform;

    [[nodiscard]] std::size_t sum() const
    {
        std::size_t s = 0;
        for (const auto& row : k) { s = std::accumulate(row.begin(), row.end(), s); }
        return s;
    }
    [[nodiscard]] std::size_t k_min() const
    {
        std::size_t v = SIZE_MAX;
        for (const auto& row : k) { v = std::min(v, *std::min_element(row.begin(), row.end())); }
        return v;
    }
    [[nodiscard]] std::size_t k_max() const
    {
        std::size_t v = 0;
        for (const auto& row : k) { v = std::max(v, *std::max_element(row.begin(), row.end())); }
        return v;
    }
    [[nodiscard]] std::size_t spread() const { return k_max() - k_min(); }
};

/// Integer apportionment of `total` proportional to `weights`, clamped to
/// [floors, caps]. Real-valued shares are water-filled against the bounds,
/// then floored; leftover units go one each in descending weight order
/// (lowest index wins ties).
[[nodiscard]] inline std::vector<std::size_t> round_budgets(const std::vector<double>& weights, std::size_t total,
                                                            const std::vector<std::size_t>& floors,
                                                            const std::vector<std::size_t>& caps)
{
    const std::size_t n = weights.size();
    if (n == 0 || floors.size() != n || caps.size() != n) {
        throw std::invalid_argument("round_budgets: weights, floors and caps must have equal nonzero length");
    }
    std::size_t sum_floor = 0;
    std::size_t sum_cap = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) {
            throw std::invalid_argument("round_budgets: weights must be finite and non-negative");
        }
        if (floors[i] > caps[i]) { throw std::invalid_argument("budget too small"); }
        sum_floor += floors[i];
        sum_cap += caps[i];
    }
    if (total < sum_floor) { throw std::invalid_argument("budget too small"); }
    if (total > sum_cap) { throw std::invalid_argument("budget too large"); }

    std::vector<double> w = weights;
    if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) { std::fill(w.begin(), w.end(), 1.0); }

    // Active-set water-filling: fix items whose proportional share leaves
    // [floor, cap], recompute the rest from the remaining total.
    enum class Fix { free, at_floor, at_cap };
    std::vector<Fix> fix(n, Fix::free);
    std::vector<double> x(n, 0.0);
    for (std::size_t round = 0; round <= n; ++round) {
        double remaining = static_cast<double>(total);
        double wsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (fix[i] == Fix::at_floor) { remaining -= static_cast<double>(floors[i]); }
            else if (fix[i] == Fix::at_cap) { remaining -= static_cast<double>(caps[i]); }
            else { wsum += w[i]; }
        }
        bool changed = false;
        double worst_low = 0.0;
        double worst_high = 0.0;
        std::size_t low_i = n;
        std::size_t high_i = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (fix[i] == Fix::at_floor) { x[i] = static_cast<double>(floors[i]); continue; }
            if (fix[i] == Fix::at_cap) { x[i] = static_cast<double>(caps[i]); continue; }
            x[i] = wsum > 0.0 ? remaining * w[i] / wsum : 0.0;
            const double below = static_cast<double>(floors[i]) - x[i];
            const double above = x[i] - static_cast<double>(caps[i]);
            if (below > worst_low) { worst_low = below; low_i = i; }
            if (above > worst_high) { worst_high = above; high_i = i; }
        }
        // Fix one side per round: whichever violation is larger in total.
        if (low_i < n || high_i < n) {
            double low_total = 0.0;
            double high_total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (fix[i] != Fix::free) { continue; }
                low_total += std::max(0.0, static_cast<double>(floors[i]) - x[i]);
                high_total += std::max(0.0, x[i] - static_cast<double>(caps[i]));
            }
            const bool fix_low = low_total >= high_total;
            for (std::size_t i = 0; i < n; ++i) {
                if (fix[i] != Fix::free) { continue; }
                if (fix_low && x[i] < static_cast<double>(floors[i])) { fix[i] = Fix::at_floor; changed = true; }
                if (!fix_low && x[i] > static_cast<double>(caps[i])) { fix[i] = Fix::at_cap; changed = true; }
            }
        }
        if (!changed) { break; }
    }

    std::vector<std::size_t> out(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double clamped = std::clamp(x[i], static_cast<double>(floors[i]), static_cast<double>(caps[i]));
        out[i] = std::clamp(static_cast<std::size_t>(std::floor(clamped + 1e-9)), floors[i], caps[i]);
        x[i] = clamped - static_cast<double>(out[i]);
        assigned += out[i];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Leftover units go by descending weight, not by remainder: the integer
    // max then tracks the real-valued max and the min keeps its floor, so the
    // spread cannot shrink when the weights sharpen.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    while (assigned < total) {
        bool progressed = false;
        for (std::size_t i : order) {
            if (assigned == total) { break; }
            if (out[i] < caps[i]) {
                ++out[i];
                ++assigned;
                progressed = true;
            }
        }
        if (!progressed) { throw std::logic_error("round_budgets: cannot place remaining budget"); }
    }
    while (assigned > total) {
        bool progressed = false;
        for (auto it = order.rbegin(); it != order.rend() && assigned > total; ++it) {
            if (out[*it] > floors[*it]) {
                --out[*it];
                --assigned;
                progressed = true;
            }
        }
        if (!progressed) { throw std::logic_error("round_budgets: cannot remove excess budget"); }
    }
    return out;
}

[[nodiscard]] inline double dampened(double mse, double alpha)
{
    if (alpha == 0.0) { return 1.0; }
    return std::pow(mse, alpha);
}

/// Layer budgets ∝ (mean over heads of pilot MSE)^α.
[[nodiscard]] inline std::vector<std::size_t> allocate_layers(const PilotReport& pilot, std::size_t total,
                                                              double alpha, std::size_t head_floor)
{
    pilot.validate();
    if (!(alpha >= 0.0)) { throw std::invalid_argument("alpha must be non-negative"); }
    const std::size_t layers = pilot.num_layers();
    const std::size_t heads = pilot.num_heads();
    std::vector<double> w(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const double mean = std::accumulate(pilot.mse[l].begin(), pilot.mse[l].end(), 0.0) / static_cast<double>(heads);
        w[l] = dampened(mean, alpha);
    }
    return round_budgets(w, total, std::vector<std::size_t>(layers, head_floor * heads),
                         std::vector<std::size_t>(layers, pilot.head_cap() * heads));
}

/// Splits each layer's budget across its heads ∝ MSE_{l,h}^α.
[[nodiscard]] inline BudgetPlan allocate_heads(const PilotReport& pilot, const std::vector<std::size_t>& layer_budgets,
                                               double alpha, std::size_t head_floor)
{
    pilot.validate();
    if (layer_budgets.size() != pilot.num_layers()) { throw std::invalid_argument("layer budgets: count mismatch"); }
    const std::size_t heads = pilot.num_heads();
    BudgetPlan plan;
    plan.alpha = alpha;
    plan.k_min_floor = head_floor;
    for (std::size_t l = 0; l < layer_budgets.size(); ++l) {
        std::vector<double> w(heads);
        for (std::size_t h = 0; h < heads; ++h) { w[h] = dampened(pilot.mse[l][h], alpha); }
        plan.k.push_back(round_budgets(w, layer_budgets[l], std::vector<std::size_t>(heads, head_floor),
                                       std::vector<std::size_t>(heads, pilot.head_cap())));
        plan.total += layer_budgets[l];
    }
    return plan;
}

/// Full plan for a policy. `layer`: layer budgets by MSE^α, even split
/// within layers. `head`: MSE^α at both levels.
[[nodiscard]] inline BudgetPlan make_plan(const PilotReport& pilot, std::size_t total, double alpha,
                                          AllocPolicy policy, std::size_t head_floor = 4)
{
    pilot.validate();
    if (head_floor == 0) { throw std::invalid_argument("head floor must be at least 1"); }
    const std::size_t cells = pilot.num_layers() * pilot.num_heads();
    if (total < head_floor * cells) {
        throw std::invalid_argument("budget too small: " + std::to_string(total) + " < floor " + std::to_string(head_floor)
                                    + " x " + std::to_string(cells) + " heads");
    }
    if (total > pilot.head_cap() * cells) {
        throw std::invalid_argument("budget too large: " + std::to_string(total) + " > cap " + std::to_string(pilot.head_cap())
                                    + " x " + std::to_string(cells) + " heads");
    }
    const double layer_alpha = policy == AllocPolicy::uniform ? 0.0 : alpha;
    const double head_alpha = policy == AllocPolicy::head ? alpha : 0.0;
    auto layers = allocate_layers(pilot, total, layer_alpha, head_floor);
    auto plan = allocate_heads(pilot, layers, head_alpha, head_floor);
    plan.alpha = alpha;
    plan.policy = policy;
    return plan;
}

/// Uniform-budget pilot compression on every (layer, head); the signal is
/// the final output-MSE term.
[[nodiscard]] inline PilotReport run_pilot(const ModelKvCache& cache, std::size_t uniform_k, std::size_t pilot_steps,
                                           CompressOptions opt)
{
    if (pilot_steps == 0) { throw std::invalid_argument("pilot steps must be at least 1"); }
    opt.method = Method::kvsculpt;
    opt.distill.outer_steps = pilot_steps;
    auto res = compress_model(cache, uniform_grid(cache.shape, uniform_k), opt);
    PilotReport rep;
    rep.pilot_steps = pilot_steps;
    rep.uniform_k = uniform_k;
    rep.context_len = cache.context_len;
    rep.retain = opt.retain;
    for (const auto& layer : res.heads) {
        std::vector<double> row;
        for (const auto& h : layer) { row.push_back(h.trace.final_output_mse); }
        rep.mse.push_back(std::move(row));
    }
    return rep;
}

[[nodiscard]] inline nlohmann::json to_json(const PilotReport& p)
{
    return {{"mse", p.mse},
            {"pilot_steps", p.pilot_steps},
            {"uniform_k", p.uniform_k},
            {"context_len", p.context_len},
            {"retain", p.retain}};
}

[[nodiscard]] inline PilotReport pilot_from_json(const nlohmann::json& j)
{
    PilotReport p;
    p.mse = j.at("mse").get<std::vector<std::vector<double>>>();
    p.pilot_steps = j.at("pilot_steps").get<std::size_t>();
    p.uniform_k = j.at("uniform_k").get<std::size_t>();
    p.context_len = j.at("context_len").get<std::size_t>();
    p.retain = j.at("retain").get<std::size_t>();
    p.validate();
    return p;
}

[[nodiscard]] inline nlohmann::json to_json(const BudgetPlan& b)
{
    return {{"k", b.k},
            {"total", b.total},
            {"alpha", b.alpha},
            {"k_min_floor", b.k_min_floor},
            {"policy", std::string{to_string(b.policy)}},
            {"k_min", b.k_min()},
            {"k_max", b.k_max()}};
}

} // namespace kvsculpt
