#pragma once

// KVD interchange files.
//
// Layout (all integers little-endian):
//   bytes 0-3   magic "KVD1"
//   bytes 4-7   u32 version (= 1)
//   bytes 8-15  u64 manifest length L
//   bytes 16..  UTF-8 JSON manifest (L bytes)
//   then        raw tensor payload, row-major
//
// The manifest's "tensors" table lists {name, dtype, shape, byte_offset,
// byte_len}; offsets are relative to the first payload byte. Float tensors
// are written as f32 by default and upcast to f64 on load.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cachestore.hpp"

namespace kvsculpt {

inline constexpr std::array<char, 4> kvd_magic{'K', 'V', 'D', '1'};
inline constexpr std::uint32_t kvd_version = 1;

enum class KvdErrc {
    io,
    bad_magic,
    version_mismatch,
    truncated,
    bad_manifest,
    inconsistent_offsets,
    missing_tensor,
};

[[nodiscard]] inline std::string_view to_string(KvdErrc e) noexcept
{
    switch (e) {
    case KvdErrc::io: return "io error";
    case KvdErrc::bad_magic: return "bad magic";
    case KvdErrc::version_mismatch: return "version mismatch";
    case KvdErrc::truncated: return "truncated payload";
    case KvdErrc::bad_manifest: return "bad manifest";
    case KvdErrc::inconsistent_offsets: return "manifest/payload offset inconsistency";
    case KvdErrc::missing_tensor: return "missing tensor";
    }
    return "unknown";
}

class KvdError : public std::runtime_error {
  public:
    KvdError(KvdErrc code, const std::string& detail)
        : std::runtime_error(std::string{to_string(code)} + (detail.empty() ? "" : ": " + detail)), code_{code}
    {}
    [[nodiscard]] KvdErrc code() const noexcept { return code_; }

  private:
    KvdErrc code_;
};

enum class DType { f32, f64, i32, i64 };

[[nodiscard]] inline std::string_view to_string(DType t) noexcept
{
    switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
    case DType::i64: return "i64";
    }
    return "f32";
}

[[nodiscard]] inline DType parse_dtype(std::string_view s)
{
    if (s == "f32") { return DType::f32; }
    if (s == "f64") { return DType::f64; }
    if (s == "i32") { return DType::i32; }
    if (s == "i64") { return DType::i64; }
    throw KvdError(KvdErrc::bad_manifest, "unknown dtype " + std::string{s});
}

[[nodiscard]] constexpr std::size_t dtype_size(DType t) noexcept
{
    return (t == DType::f32 || t == DType::i32) ? 4 : 8;
}

struct KvdTensor {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::size_t> shape;
    std::vector<std::byte> bytes; // little-endian, row-major

    [[nodiscard]] std::size_t numel() const noexcept
    {
        std::size_t n = 1;
        for (auto s : shape) { n *= s; }
        return n;
    }
};

struct KvdArchive {
    nlohmann::json meta = nlohmann::json::object(); // manifest without the tensor table
    std::vector<KvdTensor> tensors;

    [[nodiscard]] const KvdTensor* find(std::string_view name) const
    {
        auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
        return it == tensors.end() ? nullptr : &*it;
    }
    [[nodiscard]] const KvdTensor& at(std::string_view name) const
    {
        if (const auto* t = find(name)) { return *t; }
        throw KvdError(KvdErrc::missing_tensor, std::string{name});
    }
};

namespace detail {

template <class T>
void put_le(std::vector<std::byte>& out, T value)
{
    std::array<std::byte, sizeof(T)> raw{};
    std::memcpy(raw.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) { std::reverse(raw.begin(), raw.end()); }
    out.insert(out.end(), raw.begin(), raw.end());
}

template <class T>
[[nodiscard]] T get_le(const std::byte* p)
{
    std::array<std::byte, sizeof(T)> raw{};
    std::memcpy(raw.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) { std::reverse(raw.begin(), raw.end()); }
    T v{};
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Tensor encoding

[[nodiscard]] inline KvdTensor make_float_tensor(std::string name, std::vector<std::size_t> shape,
                                                 std::span<const double> values, DType dtype)
{
    KvdTensor t{std::move(name), dtype, std::move(shape), {}};
    if (t.numel() != values.size()) { throw std::invalid_argument("tensor " + t.name + ": shape/value count mismatch"); }
    t.bytes.reserve(values.size() * dtype_size(dtype));
    for (double v : values) {
        if (dtype == DType::f32) {
            detail::put_le(t.bytes, static_cast<float>(v));
        } else if (dtype == DType::f64) {
            detail::put_le(t.bytes, v);
        } else {
            throw std::invalid_argument("make_float_tensor: integer dtype requested");
        }
    }
    return t;
}

[[nodiscard]] inline KvdTensor make_matrix_tensor(std::string name, MatrixView m, DType dtype)
{
    return make_float_tensor(std::move(name), {m.rows(), m.cols()}, m.flat(), dtype);
}

template <class Int>
[[nodiscard]] KvdTensor make_int_tensor(std::string name, std::span<const Int> values, DType dtype = DType::i64)
{
    KvdTensor t{std::move(name), dtype, {values.size()}, {}};
    for (Int v : values) {
        if (dtype == DType::i64) {
            detail::put_le(t.bytes, static_cast<std::int64_t>(v));
        } else if (dtype == DType::i32) {
            detail::put_le(t.bytes, static_cast<std::int32_t>(v));
        } else {
            throw std::invalid_argument("make_int_tensor: float dtype requested");
        }
    }
    return t;
}

/// Decode any numeric tensor to f64 values.
[[nodiscard]] inline std::vector<double> tensor_values(const KvdTensor& t)
{
    std::vector<double> out(t.numel());
    const std::size_t w = dtype_size(t.dtype);
    if (t.bytes.size() != out.size() * w) { throw KvdError(KvdErrc::inconsistent_offsets, t.name); }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::byte* p = t.bytes.data() + i * w;
        switch (t.dtype) {
        case DType::f32: out[i] = static_cast<double>(detail::get_le<float>(p)); break;
        case DType::f64: out[i] = detail::get_le<double>(p); break;
        case DType::i32: out[i] = static_cast<double>(detail::get_le<std::int32_t>(p)); break;
        case DType::i64: out[i] = static_cast<double>(detail::get_le<std::int64_t>(p)); break;
        }
    }
    return out;
}

[[nodiscard]] inline std::vector<std::int64_t> tensor_ints(const KvdTensor& t)
{
    if (t.dtype == DType::i64 || t.dtype == DType::i32) {
        std::vector<std::int64_t> out(t.numel());
        const std::size_t w = dtype_size(t.dtype);
        if (t.bytes.size() != out.size() * w) { throw KvdError(KvdErrc::inconsistent_offsets, t.name); }
        for (std::size_t i = 0; i < out.size(); ++i) {
            const std::byte* p = t.bytes.data() + i * w;
            out[i] = t.dtype == DType::i64 ? detail::get_le<std::int64_t>(p) : detail::get_le<std::int32_t>(p);
        }
        return out;
    }
    std::vector<std::int64_t> out;
    for (double v : tensor_values(t)) {
        if (v != std::floor(v)) { throw KvdError(KvdErrc::bad_manifest, t.name + ": non-integer value"); }
        out.push_back(static_cast<std::int64_t>(v));
    }
    return out;
}

[[nodiscard]] inline Matrix tensor_matrix(const KvdTensor& t)
{
    if (t.shape.size() != 2) { throw KvdError(KvdErrc::bad_manifest, t.name + ": expected a 2-D tensor"); }
    return {t.shape[0], t.shape[1], tensor_values(t)};
}

// ---------------------------------------------------------------------------
// Container encode / decode

[[nodiscard]] inline std::vector<std::byte> encode_kvd(const KvdArchive& archive)
{
    nlohmann::json manifest = archive.meta;
    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : archive.tensors) {
        if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) {
            throw std::invalid_argument("tensor " + t.name + ": byte length does not match shape");
        }
        table.push_back({{"name", t.name},
                         {"dtype", std::string{to_string(t.dtype)}},
                         {"shape", t.shape},
                         {"byte_offset", offset},
                         {"byte_len", t.bytes.size()}});
        offset += t.bytes.size();
    }
    manifest["tensors"] = std::move(table);
    const std::string text = manifest.dump();

    std::vector<std::byte> out;
    out.reserve(16 + text.size() + offset);
    for (char c : kvd_magic) { out.push_back(static_cast<std::byte>(c)); }
    detail::put_le(out, kvd_version);
    detail::put_le(out, static_cast<std::uint64_t>(text.size()));
    for (char c : text) { out.push_back(static_cast<std::byte>(c)); }
    for (const auto& t : archive.tensors) { out.insert(out.end(), t.bytes.begin(), t.bytes.end()); }
    return out;
}

[[nodiscard]] inline KvdArchive decode_kvd(std::span<const std::byte> bytes)
{
    if (bytes.size() < 16) { throw KvdError(KvdErrc::truncated, "file shorter than header"); }
    for (std::size_t i = 0; i < 4; ++i) {
        if (bytes[i] != static_cast<std::byte>(kvd_magic[i])) { throw KvdError(KvdErrc::bad_magic, ""); }
    }
    const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
    if (version != kvd_version) {
        throw KvdError(KvdErrc::version_mismatch, "file version " + std::to_string(version));
    }
    const auto manifest_len = detail::get_le<std::uint64_t>(bytes.data() + 8);
    if (manifest_len > bytes.size() - 16) { throw KvdError(KvdErrc::truncated, "manifest exceeds file length"); }
    const auto* mbegin = reinterpret_cast<const char*>(bytes.data() + 16);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mbegin, mbegin + manifest_len);
    } catch (const nlohmann::json::exception& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    }
    if (!manifest.is_object() || !manifest.contains("tensors") || !manifest["tensors"].is_array()) {
        throw KvdError(KvdErrc::bad_manifest, "missing tensor table");
    }
    const std::span<const std::byte> payload = bytes.subspan(16 + manifest_len);

    KvdArchive archive;
    struct Range {
        std::size_t begin, end;
        std::string name;
    };
    std::vector<Range> ranges;
    try {
        for (const auto& entry : manifest["tensors"]) {
            KvdTensor t;
            t.name = entry.at("name").get<std::string>();
            t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            t.shape = entry.at("shape").get<std::vector<std::size_t>>();
            const auto off = entry.at("byte_offset").get<std::uint64_t>();
            const auto len = entry.at("byte_len").get<std::uint64_t>();
            if (len != t.numel() * dtype_size(t.dtype)) {
                throw KvdError(KvdErrc::inconsistent_offsets, t.name + ": byte_len does not match shape and dtype");
            }
            if (off > payload.size() || len > payload.size() - off) {
                throw KvdError(KvdErrc::truncated, t.name + ": byte range exceeds file length");
            }
            if (archive.find(t.name) != nullptr) { throw KvdError(KvdErrc::bad_manifest, "duplicate tensor " + t.name); }
            auto slice = payload.subspan(off, len);
            t.bytes.assign(slice.begin(), slice.end());
            ranges.push_back({static_cast<std::size_t>(off), static_cast<std::size_t>(off + len), t.name});
            archive.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    }
    std::sort(ranges.begin(), ranges.end(), [](const Range& a, const Range& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].begin < ranges[i - 1].end) {
            throw KvdError(KvdErrc::inconsistent_offsets, ranges[i - 1].name + " overlaps " + ranges[i].name);
        }
    }
    manifest.erase("tensors");
    archive.meta = std::move(manifest);
    return archive;
}

inline void write_kvd_file(const std::filesystem::path& path, const KvdArchive& archive)
{
    const auto bytes = encode_kvd(archive);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) { throw KvdError(KvdErrc::io, "cannot open " + path.string() + " for writing"); }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) { throw KvdError(KvdErrc::io, "write failed for " + path.string()); }
}

[[nodiscard]] inline std::vector<std::byte> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) { throw KvdError(KvdErrc::io, "cannot open " + path.string()); }
    f.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::byte> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!f) { throw KvdError(KvdErrc::io, "read failed for " + path.string()); }
    return bytes;
}

[[nodiscard]] inline KvdArchive read_kvd(const std::filesystem::path& path) { return decode_kvd(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Cache <-> archive

namespace detail {

inline std::string head_name(std::size_t layer, std::size_t kv, std::string_view what)
{
    return "layer" + std::to_string(layer) + ".kvhead" + std::to_string(kv) + "." + std::string{what};
}

inline std::string qhead_name(std::size_t layer, std::size_t qh)
{
    return "layer" + std::to_string(layer) + ".qhead" + std::to_string(qh) + ".queries";
}

inline nlohmann::json common_meta(const ModelShape& shape, const RopeConfig& rope, const std::string& grouping,
                                  std::size_t context_len, const nlohmann::json& extra)
{
    nlohmann::json meta = nlohmann::json::object();
    meta["shape"] = {{"num_layers", shape.num_layers},
                     {"num_q_heads", shape.num_q_heads},
                     {"num_kv_heads", shape.num_kv_heads},
                     {"head_dim", shape.head_dim}};
    meta["rope"] = {{"theta_base", rope.theta_base},
                    {"pairing", std::string{to_string(rope.pairing)}},
                    {"grouping", grouping}};
    meta["context_len"] = context_len;
    if (!extra.empty()) { meta["extra"] = extra; }
    return meta;
}

struct CommonMeta {
    ModelShape shape;
    RopeConfig rope;
    std::string grouping;
    std::size_t context_len = 0;
    nlohmann::json extra;
};

inline CommonMeta parse_common_meta(const nlohmann::json& meta)
{
    try {
        CommonMeta c;
        const auto& s = meta.at("shape");
        c.shape.num_layers = s.at("num_layers").get<std::size_t>();
        c.shape.num_q_heads = s.at("num_q_heads").get<std::size_t>();
        c.shape.num_kv_heads = s.at("num_kv_heads").get<std::size_t>();
        c.shape.head_dim = s.at("head_dim").get<std::size_t>();
        const auto& r = meta.at("rope");
        c.rope.head_dim = c.shape.head_dim;
        c.rope.theta_base = r.at("theta_base").get<double>();
        c.rope.pairing = parse_pairing(r.value("pairing", std::string{"interleaved"}));
        c.grouping = r.value("grouping", std::string{"contiguous"});
        c.context_len = meta.at("context_len").get<std::size_t>();
        c.extra = meta.value("extra", nlohmann::json::object());
        c.shape.validate();
        c.rope.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    } catch (const std::invalid_argument& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    }
}

inline Matrix expect_matrix(const KvdArchive& a, const std::string& name, std::size_t rows, std::size_t cols)
{
    const auto& t = a.at(name);
    if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
        throw KvdError(KvdErrc::bad_manifest, name + ": shape disagrees with manifest");
    }
    return tensor_matrix(t);
}

} // namespace detail

/// Full cache → archive. Float tensors use `dtype` (f32 or f64).
[[nodiscard]] inline KvdArchive to_archive(const ModelKvCache& c, DType dtype = DType::f32)
{
    KvdArchive a;
    a.meta = detail::common_meta(c.shape, c.rope, c.grouping, c.context_len, c.extra);
    a.meta["kind"] = "full";
    a.tensors.push_back(make_int_tensor<std::int64_t>("positions", c.positions));
    for (std::size_t l = 0; l < c.shape.num_layers; ++l) {
        for (std::size_t h = 0; h < c.shape.num_kv_heads; ++h) {
            a.tensors.push_back(make_matrix_tensor(detail::head_name(l, h, "keys"), c.heads[l][h].keys, dtype));
            a.tensors.push_back(make_matrix_tensor(detail::head_name(l, h, "values"), c.heads[l][h].values, dtype));
        }
        for (std::size_t q = 0; q < c.shape.num_q_heads; ++q) {
            a.tensors.push_back(make_matrix_tensor(detail::qhead_name(l, q), c.queries[l][q], dtype));
        }
    }
    if (c.ref_logits) {
        a.tensors.push_back(make_matrix_tensor("ref.logits", *c.ref_logits, dtype));
        a.tensors.push_back(make_int_tensor<std::int32_t>("ref.tokens", c.ref_tokens, DType::i64));
    }
    return a;
}

[[nodiscard]] inline ModelKvCache model_cache_from_archive(const KvdArchive& a)
{
    if (a.meta.value("kind", std::string{"full"}) != "full") {
        throw KvdError(KvdErrc::bad_manifest, "expected a full cache file");
    }
    auto meta = detail::parse_common_meta(a.meta);
    ModelKvCache c;
    c.shape = meta.shape;
    c.rope = meta.rope;
    c.grouping = meta.grouping;
    c.context_len = meta.context_len;
    c.extra = meta.extra;
    c.positions = tensor_ints(a.at("positions"));
    const std::size_t n = c.context_len;
    const std::size_t d = c.shape.head_dim;
    c.heads.resize(c.shape.num_layers);
    c.queries.resize(c.shape.num_layers);
    for (std::size_t l = 0; l < c.shape.num_layers; ++l) {
        for (std::size_t h = 0; h < c.shape.num_kv_heads; ++h) {
            c.heads[l].push_back({detail::expect_matrix(a, detail::head_name(l, h, "keys"), n, d),
                                  detail::expect_matrix(a, detail::head_name(l, h, "values"), n, d), c.positions});
        }
        for (std::size_t q = 0; q < c.shape.num_q_heads; ++q) {
            c.queries[l].push_back(detail::expect_matrix(a, detail::qhead_name(l, q), n, d));
        }
    }
    if (const auto* logits = a.find("ref.logits")) {
        c.ref_logits = tensor_matrix(*logits);
        for (auto v : tensor_ints(a.at("ref.tokens"))) { c.ref_tokens.push_back(static_cast<std::int32_t>(v)); }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    }
    return c;
}

/// Compressed cache → archive. Per head: `.kc`/`.vc` hold the k distilled
/// pairs, `.keys`/`.values` the m retained pairs, and `.positions` lists k
/// markers of −1 followed by the retained positions.
[[nodiscard]] inline KvdArchive to_archive(const CompressedKvCache& c, DType dtype = DType::f32)
{
    KvdArchive a;
    a.meta = detail::common_meta(c.shape, c.rope, c.grouping, c.context_len, c.extra);
    a.meta["kind"] = "compressed";
    a.meta["retain"] = c.retain;
    a.tensors.push_back(make_int_tensor<std::int64_t>("positions", c.positions));
    for (std::size_t l = 0; l < c.shape.num_layers; ++l) {
        for (std::size_t h = 0; h < c.shape.num_kv_heads; ++h) {
            const auto& head = c.heads[l][h];
            std::vector<std::int64_t> pos(head.k(), -1);
            pos.insert(pos.end(), head.retain_positions.begin(), head.retain_positions.end());
            a.tensors.push_back(make_matrix_tensor(detail::head_name(l, h, "kc"), head.k_c, dtype));
            a.tensors.push_back(make_matrix_tensor(detail::head_name(l, h, "vc"), head.v_c, dtype));
            a.tensors.push_back(make_matrix_tensor(detail::head_name(l, h, "keys"), head.k_ret, dtype));
            a.tensors.push_back(make_matrix_tensor(detail::head_name(l, h, "values"), head.v_ret, dtype));
            a.tensors.push_back(make_int_tensor<std::int64_t>(detail::head_name(l, h, "positions"), pos));
        }
    }
    return a;
}

[[nodiscard]] inline CompressedKvCache compressed_cache_from_archive(const KvdArchive& a)
{
    if (a.meta.value("kind", std::string{}) != "compressed") {
        throw KvdError(KvdErrc::bad_manifest, "expected a compressed cache file");
    }
    auto meta = detail::parse_common_meta(a.meta);
    CompressedKvCache c;
    c.shape = meta.shape;
    c.rope = meta.rope;
    c.grouping = meta.grouping;
    c.context_len = meta.context_len;
    c.extra = meta.extra;
    try {
        c.retain = a.meta.at("retain").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    }
    c.positions = tensor_ints(a.at("positions"));
    const std::size_t d = c.shape.head_dim;
    c.heads.resize(c.shape.num_layers);
    for (std::size_t l = 0; l < c.shape.num_layers; ++l) {
        for (std::size_t h = 0; h < c.shape.num_kv_heads; ++h) {
            const auto& kc_t = a.at(detail::head_name(l, h, "kc"));
            if (kc_t.shape.size() != 2) { throw KvdError(KvdErrc::bad_manifest, kc_t.name + ": expected 2-D"); }
            const std::size_t k = kc_t.shape[0];
            CompressedHead head;
            head.k_c = detail::expect_matrix(a, detail::head_name(l, h, "kc"), k, d);
            head.v_c = detail::expect_matrix(a, detail::head_name(l, h, "vc"), k, d);
            head.k_ret = detail::expect_matrix(a, detail::head_name(l, h, "keys"), c.retain, d);
            head.v_ret = detail::expect_matrix(a, detail::head_name(l, h, "values"), c.retain, d);
            auto pos = tensor_ints(a.at(detail::head_name(l, h, "positions")));
            if (pos.size() != k + c.retain
                || !std::all_of(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k),
                                [](std::int64_t p) { return p == -1; })) {
                throw KvdError(KvdErrc::bad_manifest, "head positions must be k markers of -1 then retain positions");
            }
            head.retain_positions.assign(pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end());
            c.heads[l].push_back(std::move(head));
        }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw KvdError(KvdErrc::bad_manifest, e.what());
    }
    return c;
}

inline void write_kvd(const std::filesystem::path& path, const ModelKvCache& c, DType dtype = DType::f32)
{
    write_kvd_file(path, to_archive(c, dtype));
}

inline void write_kvd(const std::filesystem::path& path, const CompressedKvCache& c, DType dtype = DType::f32)
{
    write_kvd_file(path, to_archive(c, dtype));
}

[[nodiscard]] inline ModelKvCache read_model_cache(const std::filesystem::path& path)
{
    return model_cache_from_archive(read_kvd(path));
}

[[nodiscard]] inline CompressedKvCache read_compressed_cache(const std::filesystem::path& path)
{
    return compressed_cache_from_archive(read_kvd(path));
}

} // namespace kvsculpt
