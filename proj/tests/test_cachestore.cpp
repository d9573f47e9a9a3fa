#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "kvsculpt/cachestore.hpp"
#include "kvsculpt/kvd.hpp"
#include "kvsculpt/toymodel.hpp"
#include "test_support.hpp"

using namespace kvsculpt;

namespace {

HeadCache random_head(Rng& rng, std::size_t n, std::size_t d)
{
    HeadCache h{kvtest::random_matrix(rng, n, d), kvtest::random_matrix(rng, n, d), {}};
    for (std::size_t i = 0; i < n; ++i) { h.positions.push_back(static_cast<std::int64_t>(i)); }
    return h;
}

KvdErrc decode_error(std::span<const std::byte> bytes)
{
    try {
        (void)decode_kvd(bytes);
    } catch (const KvdError& e) {
        return e.code();
    }
    ADD_FAILURE() << "decode accepted a corrupt file";
    return KvdErrc::io;
}

std::filesystem::path temp_path(const std::string& name)
{
    return std::filesystem::temp_directory_path() / ("kvsculpt_test_" + name);
}

} // namespace

TEST(Zones, RatioAndUniformBudget)
{
    EXPECT_DOUBLE_EQ(compression_ratio(358, 256, 2048), (358.0 + 256.0) / 2048.0);
    EXPECT_EQ(uniform_budget(0.3, 256, 2048), 358U);
    EXPECT_EQ(uniform_budget(0.3, 32, 256), 44U);
    EXPECT_THROW((void)uniform_budget(0.1, 256, 2048), std::invalid_argument);
    EXPECT_THROW((void)uniform_budget(0.0, 4, 16), std::invalid_argument);
    EXPECT_THROW((void)compression_ratio(1, 0, 16), std::invalid_argument);
}

TEST(Zones, SplitPartitionsInOrder)
{
    Rng rng{41};
    auto h = random_head(rng, 10, 4);
    auto z = split_zones(h, 3);
    EXPECT_EQ(z.old_size(), 7U);
    EXPECT_EQ(z.retain_size(), 3U);
    EXPECT_EQ(z.retain_positions.front(), 7);
    EXPECT_EQ(z.old_keys(6, 2), h.keys(6, 2));
    EXPECT_EQ(z.retain_values(0, 1), h.values(7, 1));
    EXPECT_EQ(z.head_dim(), 4U);
    try {
        (void)split_zones(h, 10);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "invalid retain size");
    }
    EXPECT_THROW((void)split_zones(h, 0), std::invalid_argument);
}

TEST(Zones, HeadValidation)
{
    Rng rng{42};
    auto h = random_head(rng, 4, 2);
    h.positions[2] = 1;
    EXPECT_THROW(h.validate(), std::invalid_argument);
    auto z = split_zones(random_head(rng, 6, 2), 2);
    EXPECT_THROW((void)make_compressed(z, Matrix(0, 2), Matrix(0, 2)), std::invalid_argument);
    Matrix bad(1, 2);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW((void)make_compressed(z, bad, Matrix(1, 2)), std::invalid_argument);
    auto c = make_compressed(z, Matrix(2, 2, 1.0), Matrix(2, 2, 2.0));
    EXPECT_EQ(c.keys().rows(), 4U);
    EXPECT_EQ(c.values()(3, 1), z.retain_values(1, 1));
}

TEST(Kvd, FullCacheRoundTripF64IsExact)
{
    auto cache = generate_toy_cache(ToyModelConfig{}, 24, 5);
    const auto path = temp_path("full.kvd");
    write_kvd(path, cache, DType::f64);
    auto back = read_model_cache(path);
    EXPECT_EQ(back.shape, cache.shape);
    EXPECT_EQ(back.rope, cache.rope);
    EXPECT_EQ(back.positions, cache.positions);
    EXPECT_EQ(back.ref_tokens, cache.ref_tokens);
    ASSERT_TRUE(back.ref_logits.has_value());
    EXPECT_EQ(*back.ref_logits, *cache.ref_logits);
    EXPECT_EQ(back.extra, cache.extra);
    for (std::size_t l = 0; l < cache.shape.num_layers; ++l) {
        for (std::size_t h = 0; h < cache.shape.num_kv_heads; ++h) {
            EXPECT_EQ(back.heads[l][h].keys, cache.heads[l][h].keys);
            EXPECT_EQ(back.heads[l][h].values, cache.heads[l][h].values);
        }
        for (std::size_t q = 0; q < cache.shape.num_q_heads; ++q) { EXPECT_EQ(back.queries[l][q], cache.queries[l][q]); }
    }
    std::filesystem::remove(path);
}

TEST(Kvd, F32RoundTripWithinSinglePrecision)
{
    auto cache = generate_toy_cache(ToyModelConfig{}, 16, 0);
    const auto path = temp_path("f32.kvd");
    write_kvd(path, cache, DType::f32);
    auto back = read_model_cache(path);
    const auto& a = cache.heads[1][0].keys;
    const auto& b = back.heads[1][0].keys;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(b.flat()[i], a.flat()[i], 1e-6 * (1.0 + std::abs(a.flat()[i])));
    }
    EXPECT_FALSE(back.ref_logits.has_value());
    std::filesystem::remove(path);
}

TEST(Kvd, CompressedRoundTrip)
{
    Rng rng{43};
    CompressedKvCache c;
    c.shape = {2, 2, 1, 4};
    c.rope = RopeConfig{4, 10000.0};
    c.context_len = 12;
    c.retain = 3;
    c.heads.resize(2);
    for (std::size_t l = 0; l < 2; ++l) {
        auto z = split_zones(random_head(rng, 12, 4), 3);
        c.heads[l].push_back(make_compressed(z, kvtest::random_matrix(rng, 2 + l, 4), kvtest::random_matrix(rng, 2 + l, 4)));
    }
    c.extra = {{"note", "x"}};
    const auto path = temp_path("comp.kvd");
    write_kvd(path, c, DType::f64);
    auto back = read_compressed_cache(path);
    EXPECT_EQ(back.total_budget(), 5U);
    EXPECT_EQ(back.heads[1][0].k_c, c.heads[1][0].k_c);
    EXPECT_EQ(back.heads[1][0].v_ret, c.heads[1][0].v_ret);
    EXPECT_EQ(back.heads[0][0].retain_positions, c.heads[0][0].retain_positions);
    EXPECT_EQ(back.extra, c.extra);
    EXPECT_THROW((void)read_model_cache(path), KvdError);
    std::filesystem::remove(path);
}

TEST(Kvd, RejectsCorruptFiles)
{
    KvdArchive a;
    a.meta = {{"kind", "test"}};
    a.tensors.push_back(make_float_tensor("x", {2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}, DType::f32));
    const auto good = encode_kvd(a);
    auto back = decode_kvd(good);
    EXPECT_EQ(tensor_values(back.at("x")), (std::vector<double>{1, 2, 3, 4, 5, 6}));

    EXPECT_EQ(decode_error(std::span{good}.first(10)), KvdErrc::truncated);
    EXPECT_EQ(decode_error(std::span{good}.first(good.size() - 4)), KvdErrc::truncated);

    auto magic = good;
    magic[0] = std::byte{'X'};
    EXPECT_EQ(decode_error(magic), KvdErrc::bad_magic);

    auto version = good;
    version[4] = std::byte{9};
    EXPECT_EQ(decode_error(version), KvdErrc::version_mismatch);

    auto manifest = good;
    manifest[16] = std::byte{'!'};
    EXPECT_EQ(decode_error(manifest), KvdErrc::bad_manifest);

    EXPECT_THROW((void)back.at("y"), KvdError);
    EXPECT_THROW((void)read_kvd(temp_path("does_not_exist.kvd")), KvdError);
}

TEST(Kvd, IntTensorsAndDtypes)
{
    std::vector<std::int64_t> v{-3, 0, 1LL << 40};
    auto t = make_int_tensor<std::int64_t>("ids", v);
    EXPECT_EQ(tensor_ints(t), v);
    EXPECT_EQ(parse_dtype("f64"), DType::f64);
    EXPECT_THROW((void)parse_dtype("bf16"), KvdError);
    EXPECT_EQ(dtype_size(DType::i32), 4U);
}
