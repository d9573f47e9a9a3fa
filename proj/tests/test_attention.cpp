#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "kvsculpt/attention.hpp"
#include "test_support.hpp"

using namespace kvsculpt;

TEST(Attend, SingleKeyReturnsItsValue)
{
    Matrix q = Matrix::from_rows({{0.3, -1.0}});
    Matrix k = Matrix::from_rows({{2.0, 1.0}});
    Matrix v = Matrix::from_rows({{4.0, 5.0}});
    auto out = attend(q, k, v);
    EXPECT_EQ(out.output, v);
    EXPECT_NEAR(out.lse[0], (0.6 - 1.0) / std::sqrt(2.0), 1e-15);
}

TEST(Attend, EqualScoresAverageValues)
{
    Matrix q(1, 2);
    Matrix k = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    Matrix v = Matrix::from_rows({{2.0, 0.0}, {0.0, 4.0}});
    auto out = attend(q, k, v);
    EXPECT_DOUBLE_EQ(out.output(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(out.output(0, 1), 2.0);
    EXPECT_NEAR(out.lse[0], std::log(2.0), 1e-15);
}

TEST(Attend, Errors)
{
    try {
        (void)attend(Matrix(1, 2), Matrix(0, 2), Matrix(0, 2));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "empty cache");
    }
    EXPECT_THROW((void)attend(Matrix(1, 3), Matrix(2, 2), Matrix(2, 2)), std::invalid_argument);
    EXPECT_THROW((void)attend(Matrix(1, 2), Matrix(2, 2), Matrix(3, 2)), std::invalid_argument);
}

TEST(Combine, EmptyChunkIsNeutral)
{
    Rng rng{31};
    Matrix q = kvtest::random_matrix(rng, 3, 4);
    auto a = attend(q, kvtest::random_matrix(rng, 5, 4), kvtest::random_matrix(rng, 5, 4));
    auto left = combine_chunks(AttentionOutput::empty(3, 4), a);
    auto right = combine_chunks(a, AttentionOutput::empty(3, 4));
    EXPECT_EQ(left.output, a.output);
    EXPECT_EQ(right.lse, a.lse);
    auto both = combine_chunks(AttentionOutput::empty(3, 4), AttentionOutput::empty(3, 4));
    EXPECT_EQ(both.lse[0], -std::numeric_limits<double>::infinity());
}

TEST(Combine, MatchesMonolithicOnRandomSplits)
{
    Rng rng{32};
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 2 + rng.below(40);
        const std::size_t d = 2 * (1 + rng.below(8));
        const std::size_t nq = 1 + rng.below(6);
        const double scale = 1.0 + 10.0 * rng.uniform();
        Matrix q = kvtest::random_matrix(rng, nq, d, scale);
        Matrix k = kvtest::random_matrix(rng, n, d);
        Matrix v = kvtest::random_matrix(rng, n, d);
        const std::size_t split = 1 + rng.below(n - 1);
        auto whole = attend(q, k, v);
        auto a = attend(q, k.row_block(0, split), v.row_block(0, split));
        auto b = attend(q, k.row_block(split, n - split), v.row_block(split, n - split));
        auto merged = combine_chunks(a, b);
        EXPECT_LE(kvtest::max_abs_diff(merged.output, whole.output), 1e-10);
        for (std::size_t i = 0; i < nq; ++i) { EXPECT_NEAR(merged.lse[i], whole.lse[i], 1e-10); }
    }
}

TEST(Combine, IsAssociative)
{
    Rng rng{33};
    Matrix q = kvtest::random_matrix(rng, 4, 6);
    std::vector<AttentionOutput> parts;
    for (int c = 0; c < 3; ++c) { parts.push_back(attend(q, kvtest::random_matrix(rng, 4, 6), kvtest::random_matrix(rng, 4, 6))); }
    auto l = combine_chunks(combine_chunks(parts[0], parts[1]), parts[2]);
    auto r = combine_chunks(parts[0], combine_chunks(parts[1], parts[2]));
    EXPECT_LE(kvtest::max_abs_diff(l.output, r.output), 1e-13);
}

TEST(Shape, GroupsAndValidation)
{
    ModelShape s{4, 8, 2, 16};
    EXPECT_EQ(s.group_size(), 4U);
    EXPECT_EQ(qheads_for_kv(s, 1), (std::vector<std::size_t>{4, 5, 6, 7}));
    EXPECT_THROW((void)qheads_for_kv(s, 2), std::out_of_range);
    EXPECT_THROW((ModelShape{4, 6, 4, 16}.validate()), std::invalid_argument);
}

TEST(Shape, GqaExpandSelectsGroup)
{
    ModelShape s{1, 4, 2, 2};
    std::vector<Matrix> qs;
    for (int h = 0; h < 4; ++h) { qs.emplace_back(1, 2, static_cast<double>(h)); }
    auto views = gqa_expand(s, qs, 1);
    ASSERT_EQ(views.size(), 2U);
    EXPECT_EQ(views[0](0, 0), 2.0);
    EXPECT_EQ(views[1](0, 0), 3.0);
}
