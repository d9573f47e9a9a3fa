#include <gtest/gtest.h>

#include "kvsculpt/baselines.hpp"
#include "test_support.hpp"

using namespace kvsculpt;
using kvtest::random_head_problem;

TEST(Method, Names)
{
    for (auto m : {Method::random, Method::attn, Method::selectfit, Method::kvsculpt}) {
        EXPECT_EQ(parse_method(to_string(m)), m);
    }
    EXPECT_THROW((void)parse_method("h2o"), std::invalid_argument);
}

TEST(Random, SubsetIsSortedDistinctAndSeeded)
{
    auto a = random_subset(50, 10, 7);
    EXPECT_EQ(a, random_subset(50, 10, 7));
    EXPECT_NE(a, random_subset(50, 10, 8));
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
    EXPECT_LT(a.back(), 50U);
}

TEST(Random, InclusionFrequencyIsUniform)
{
    // each of 10 rows should be kept with probability 3/10
    constexpr int trials = 20000;
    std::vector<int> hits(10, 0);
    for (int s = 0; s < trials; ++s) {
        for (auto i : random_subset(10, 3, static_cast<std::uint64_t>(s))) { ++hits[i]; }
    }
    // 5 standard deviations of a Binomial(20000, 0.3)
    const double sd = std::sqrt(trials * 0.3 * 0.7);
    for (int h : hits) { EXPECT_NEAR(h, trials * 0.3, 5.0 * sd); }
}

TEST(Eviction, KeepsOriginalPairs)
{
    Rng rng{91};
    auto p = random_head_problem(rng, 20, 5, 4, 2, 6);
    auto head = evict_random(p->zone, 4, 3);
    auto idx = random_subset(15, 4, 3);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(head.k_c(j, 1), p->zone.old_keys(idx[j], 1));
        EXPECT_EQ(head.v_c(j, 2), p->zone.old_values(idx[j], 2));
    }
    EXPECT_EQ(head.k_ret, Matrix(p->zone.retain_keys));
}

TEST(Eviction, AttnScoreUsesSharedImportance)
{
    Rng rng{92};
    auto p = random_head_problem(rng, 20, 5, 4, 2, 6, 3.0);
    auto head = evict_attn_score(p->zone, p->queries, 5);
    auto init = init_keys_topk(p->zone, p->queries, 5);
    EXPECT_EQ(head.k_c, init.k_c);
    EXPECT_EQ(head.v_c, init.v_c);
}

TEST(SelectFit, SameKeysAsAttnScoreWithRefitValues)
{
    Rng rng{93};
    auto p = random_head_problem(rng, 30, 6, 8, 2, 12, 2.0);
    auto attn = evict_attn_score(p->zone, p->queries, 6);
    auto fit = select_and_fit(p->zone, p->queries, p->target, 6, 1e-3);
    EXPECT_EQ(fit.k_c, attn.k_c);
    auto views = p->queries.views();
    auto w = attention_weights(views, attn.k_c, p->zone.retain_keys);
    EXPECT_EQ(fit.v_c, solve_values(w, p->zone.retain_values, stacked_targets(p->target), 1e-3));
    // refit values can only reduce the output term relative to the original values (up to the ridge penalty)
    EXPECT_LE(head_loss(fit, p->queries, p->target, 1.0).output_mse,
              head_loss(attn, p->queries, p->target, 1.0).output_mse + 1e-6);
}

TEST(Dispatch, MatchesDirectCalls)
{
    Rng rng{94};
    auto p = random_head_problem(rng, 24, 6, 8, 2, 10, 2.0);
    DistillConfig cfg;
    cfg.outer_steps = 10;
    cfg.seed = 5;
    EXPECT_EQ(compress_head(Method::random, p->problem(), 4, cfg).head.k_c, evict_random(p->zone, 4, 5).k_c);
    EXPECT_EQ(compress_head(Method::attn, p->problem(), 4, cfg).head.k_c, evict_attn_score(p->zone, p->queries, 4).k_c);
    auto sf = compress_head(Method::selectfit, p->problem(), 4, cfg);
    EXPECT_TRUE(sf.trace.losses.empty());
    auto ks = compress_head(Method::kvsculpt, p->problem(), 4, cfg);
    EXPECT_EQ(ks.trace.losses.size(), 10U);
    EXPECT_EQ(ks.head.k_c, distill_head(p->problem(), 4, cfg).head.k_c);
}

TEST(Dispatch, BudgetErrors)
{
    Rng rng{95};
    auto p = random_head_problem(rng, 10, 4, 4, 2, 4);
    for (auto m : {Method::random, Method::attn, Method::selectfit, Method::kvsculpt}) {
        EXPECT_THROW((void)compress_head(m, p->problem(), 7, DistillConfig{}), std::invalid_argument);
        EXPECT_THROW((void)compress_head(m, p->problem(), 0, DistillConfig{}), std::invalid_argument);
    }
}
