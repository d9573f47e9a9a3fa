#include <algorithm>
#include <numeric>
#include <gtest/gtest.h>

#include "kvsculpt/allocator.hpp"
#include "kvsculpt/toymodel.hpp"
#include "test_support.hpp"

using namespace kvsculpt;

namespace {

using Sizes = std::vector<std::size_t>;

PilotReport make_pilot(std::vector<std::vector<double>> mse, std::size_t n = 256, std::size_t m = 32)
{
    PilotReport p;
    p.mse = std::move(mse);
    p.pilot_steps = 60;
    p.uniform_k = 44;
    p.context_len = n;
    p.retain = m;
    return p;
}

PilotReport random_pilot(Rng& rng, std::size_t layers, std::size_t heads)
{
    std::vector<std::vector<double>> mse(layers, std::vector<double>(heads));
    for (auto& row : mse) {
        for (double& v : row) { v = std::exp(3.0 * rng.normal()); }
    }
    return make_pilot(std::move(mse));
}

} // namespace

TEST(RoundBudgets, NearEvenSplitFirstIndexWins)
{
    EXPECT_EQ(round_budgets({1, 1, 1}, 10, {1, 1, 1}, {10, 10, 10}), (Sizes{4, 3, 3}));
}

TEST(RoundBudgets, ExactProportionality)
{
    EXPECT_EQ(round_budgets({2, 1, 1}, 400, {1, 1, 1}, {400, 400, 400}), (Sizes{200, 100, 100}));
}

TEST(RoundBudgets, CapBindsAndSurplusMoves)
{
    auto out = round_budgets({1e6, 1, 1, 1}, 100, {1, 1, 1, 1}, {40, 40, 40, 40});
    EXPECT_EQ(out[0], 40U);
    EXPECT_EQ(out[1] + out[2] + out[3], 60U);
    EXPECT_EQ(out, (Sizes{40, 20, 20, 20}));
}

TEST(RoundBudgets, FloorBinds)
{
    // √467 : 1 over a budget of 100 would give ≈ 4.4 : 95.6; the floor keeps 4
    auto out = round_budgets({std::sqrt(467.0), 1.0}, 100, {4, 4}, {224, 224});
    EXPECT_EQ(out, (Sizes{96, 4}));
    EXPECT_EQ(round_budgets({1e9, 1, 1}, 30, {5, 5, 5}, {100, 100, 100}), (Sizes{20, 5, 5}));
}

TEST(RoundBudgets, Errors)
{
    try {
        (void)round_budgets({1, 1}, 3, {2, 2}, {10, 10});
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "budget too small");
    }
    EXPECT_THROW((void)round_budgets({1, 1}, 30, {1, 1}, {10, 10}), std::invalid_argument);
    EXPECT_THROW((void)round_budgets({1, -1}, 4, {1, 1}, {10, 10}), std::invalid_argument);
    EXPECT_THROW((void)round_budgets({}, 4, {}, {}), std::invalid_argument);
}

TEST(RoundBudgets, ConservesSumRespectsBoundsAndIsMonotone)
{
    Rng rng{101};
    for (int rep = 0; rep < 500; ++rep) {
        const std::size_t n = 1 + rng.below(10);
        std::vector<double> w(n);
        for (double& v : w) { v = rng.uniform() < 0.2 ? 0.0 : std::exp(2.0 * rng.normal()); }
        Sizes floors(n);
        Sizes caps(n);
        std::size_t lo = 0;
        std::size_t hi = 0;
        for (std::size_t i = 0; i < n; ++i) {
            floors[i] = rng.below(5);
            caps[i] = floors[i] + rng.below(60);
            lo += floors[i];
            hi += caps[i];
        }
        const std::size_t total = lo + rng.below(hi - lo + 1);
        auto out = round_budgets(w, total, floors, caps);
        EXPECT_EQ(std::accumulate(out.begin(), out.end(), std::size_t{0}), total);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_GE(out[i], floors[i]);
            EXPECT_LE(out[i], caps[i]);
        }
        // with shared bounds, a higher weight never gets strictly less
        Sizes f(n, 1);
        Sizes c(n, 1000);
        const std::size_t t = n + rng.below(200);
        auto u = round_budgets(w, t, f, c);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (w[i] > w[j]) { EXPECT_GE(u[i], u[j]); }
            }
        }
    }
}

TEST(Allocate, LayerExampleFourToOne)
{
    // MSE 4:1:1, α = 0.5 → weights 2:1:1
    auto pilot = make_pilot({{4.0}, {1.0}, {1.0}}, 1000, 10);
    EXPECT_EQ(allocate_layers(pilot, 400, 0.5, 1), (Sizes{200, 100, 100}));
}

TEST(Allocate, AlphaZeroIsUniform)
{
    Rng rng{102};
    auto pilot = random_pilot(rng, 4, 2);
    auto plan = make_plan(pilot, 352, 0.0, AllocPolicy::head);
    EXPECT_EQ(plan.k_min(), 44U);
    EXPECT_EQ(plan.k_max(), 44U);
    auto uni = make_plan(pilot, 352, 0.5, AllocPolicy::uniform);
    EXPECT_EQ(uni.spread(), 0U);
    EXPECT_EQ(uni.alpha, 0.5);
}

TEST(Allocate, EqualMseIsUniform)
{
    auto pilot = make_pilot({{0.3, 0.3}, {0.3, 0.3}, {0.3, 0.3}});
    auto plan = make_plan(pilot, 300, 1.0, AllocPolicy::head);
    EXPECT_EQ(plan.k, (BudgetGrid{{50, 50}, {50, 50}, {50, 50}}));
}

TEST(Allocate, HeadSplitAsymmetry)
{
    auto pilot = make_pilot({{467.0, 1.0}});
    auto plan = allocate_heads(pilot, {100}, 0.5, 4);
    EXPECT_EQ(plan.k, (BudgetGrid{{96, 4}}));
    auto single = allocate_heads(make_pilot({{2.0}, {5.0}}), {10, 30}, 0.5, 4);
    EXPECT_EQ(single.k, (BudgetGrid{{10}, {30}}));
}

TEST(Allocate, LayerPolicySplitsEvenlyWithinLayer)
{
    auto pilot = make_pilot({{100.0, 1.0}, {1.0, 1.0}});
    auto plan = make_plan(pilot, 200, 0.5, AllocPolicy::layer);
    // odd layer totals leave one unit for the first head
    EXPECT_LE(plan.k[0][0] - plan.k[0][1], 1U);
    EXPECT_LE(plan.k[1][0] - plan.k[1][1], 1U);
    EXPECT_GT(plan.k[0][1], plan.k[1][0]);
    EXPECT_EQ(plan.sum(), 200U);
}

TEST(Allocate, SpreadNonDecreasingInAlphaAndSumExact)
{
    Rng rng{103};
    for (int rep = 0; rep < 2000; ++rep) {
        auto pilot = random_pilot(rng, 1 + rng.below(6), 1 + rng.below(4));
        const std::size_t cells = pilot.num_layers() * pilot.num_heads();
        const std::size_t total = cells * (4 + rng.below(150));
        for (auto policy : {AllocPolicy::uniform, AllocPolicy::layer}) {
            std::size_t prev = 0;
            for (double a : {0.0, 0.3, 0.5, 0.7, 1.0}) {
                auto plan = make_plan(pilot, total, a, policy);
                EXPECT_EQ(plan.sum(), total);
                EXPECT_GE(plan.k_min(), 4U);
                EXPECT_LE(plan.k_max(), pilot.head_cap());
                if (a == 0.0 || policy == AllocPolicy::uniform) { EXPECT_LE(plan.spread(), 1U); }
                EXPECT_GE(plan.spread(), prev) << "alpha " << a << " policy " << to_string(policy);
                prev = plan.spread();
            }
        }
    }
}

// Per-head plans: the layer totals keep the monotone spread, the global
// per-head spread does not (a layer can lose budget while its heads diverge).
TEST(Allocate, HeadPolicyLayerTotalsMonotone)
{
    Rng rng{104};
    for (int rep = 0; rep < 500; ++rep) {
        auto pilot = random_pilot(rng, 1 + rng.below(6), 1 + rng.below(4));
        const std::size_t cells = pilot.num_layers() * pilot.num_heads();
        const std::size_t total = cells * (4 + rng.below(150));
        std::size_t prev = 0;
        for (double a : {0.0, 0.3, 0.5, 0.7, 1.0}) {
            auto plan = make_plan(pilot, total, a, AllocPolicy::head);
            EXPECT_EQ(plan.sum(), total);
            std::vector<std::size_t> layer_totals;
            for (const auto& row : plan.k) { layer_totals.push_back(std::accumulate(row.begin(), row.end(), std::size_t{0})); }
            const auto [lo, hi] = std::minmax_element(layer_totals.begin(), layer_totals.end());
            EXPECT_GE(*hi - *lo, prev);
            prev = *hi - *lo;
        }
    }
}

TEST(Allocate, HeadPolicySpreadCanShrink)
{
    // layer 1 holds the single hardest head but the lower layer mean, so a
    // sharper alpha moves budget away from it
    auto pilot = make_pilot({{1.0, 1.0}, {1.2, 0.0001}});
    auto half = make_plan(pilot, 400, 0.5, AllocPolicy::head);
    auto full = make_plan(pilot, 400, 1.0, AllocPolicy::head);
    EXPECT_EQ(half.k, (BudgetGrid{{113, 113}, {170, 4}}));
    EXPECT_EQ(full.k, (BudgetGrid{{125, 125}, {146, 4}}));
    EXPECT_LT(full.spread(), half.spread());
}

TEST(Allocate, ValidationErrors)
{
    auto pilot = make_pilot({{1.0, 1.0}});
    EXPECT_THROW((void)make_plan(pilot, 7, 0.5, AllocPolicy::layer), std::invalid_argument);
    EXPECT_THROW((void)make_plan(pilot, 1000, 0.5, AllocPolicy::layer), std::invalid_argument);
    EXPECT_THROW((void)make_plan(make_pilot({{-1.0}}), 10, 0.5, AllocPolicy::layer), std::invalid_argument);
    EXPECT_THROW((void)make_plan(make_pilot({{1.0, 2.0}, {1.0}}), 40, 0.5, AllocPolicy::layer), std::invalid_argument);
    EXPECT_THROW((void)allocate_layers(pilot, 10, -0.5, 4), std::invalid_argument);
    EXPECT_EQ(parse_alloc_policy("head"), AllocPolicy::head);
    EXPECT_THROW((void)parse_alloc_policy("static"), std::invalid_argument);
    EXPECT_EQ(default_pilot_steps(AllocPolicy::layer), 60U);
    EXPECT_EQ(default_pilot_steps(AllocPolicy::head), 30U);
}

TEST(Allocate, JsonRoundTrip)
{
    auto pilot = make_pilot({{0.25, 1.5}, {2.0, 0.0}});
    auto back = pilot_from_json(to_json(pilot));
    EXPECT_EQ(back.mse, pilot.mse);
    EXPECT_EQ(back.retain, 32U);
    auto plan = make_plan(pilot, 100, 0.5, AllocPolicy::head);
    auto j = to_json(plan);
    EXPECT_EQ(j["total"], 100);
    EXPECT_EQ(j["policy"], "head");
    EXPECT_EQ(j["k"].get<BudgetGrid>(), plan.k);
}

TEST(Pilot, IdenticalLayersGiveEqualMse)
{
    ToyModelConfig cfg;
    auto cache = generate_toy_cache(cfg, 64, 0);
    for (std::size_t l = 1; l < cache.shape.num_layers; ++l) {
        cache.heads[l] = cache.heads[0];
        cache.queries[l] = cache.queries[0];
    }
    CompressOptions opt;
    opt.retain = 8;
    opt.distill.n_synth = 32;
    auto pilot = run_pilot(cache, 8, 10, opt);
    for (std::size_t h = 0; h < 2; ++h) {
        double lo = pilot.mse[0][h];
        double hi = lo;
        for (const auto& row : pilot.mse) {
            lo = std::min(lo, row[h]);
            hi = std::max(hi, row[h]);
        }
        EXPECT_LE(hi - lo, 0.2 * hi);
    }
}

TEST(Pilot, ConstantValueHeadGetsTheFloor)
{
    ToyModelConfig cfg;
    auto cache = generate_toy_cache(cfg, 64, 0);
    for (double& v : cache.heads[2][1].values.flat()) { v = 0.75; }
    CompressOptions opt;
    opt.retain = 8;
    opt.distill.n_synth = 32;
    auto pilot = run_pilot(cache, 8, 10, opt);
    // only ridge shrinkage of the fitted values is left
    EXPECT_LT(pilot.mse[2][1], 1e-5);
    for (std::size_t l = 0; l < pilot.num_layers(); ++l) {
        for (std::size_t h = 0; h < pilot.num_heads(); ++h) {
            if (l != 2 || h != 1) { EXPECT_GT(pilot.mse[l][h], 10.0 * pilot.mse[2][1]); }
        }
    }
    auto plan = make_plan(pilot, 64, 0.5, AllocPolicy::head);
    EXPECT_EQ(plan.k[2][1], 4U);
}
