#pragma once

// Single-head attention with log-sum-exp tracking, chunk combination and the
// contiguous GQA query-head grouping.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "numkit.hpp"

namespace kvsculpt {

struct ModelShape {
    std::size_t num_layers = 0;
    std::size_t num_q_heads = 0;
    std::size_t num_kv_heads = 0;
    std::size_t head_dim = 0;

    [[nodiscard]] std::size_t group_size() const noexcept
    {
        return num_kv_heads == 0 ? 0 : num_q_heads / num_kv_heads;
    }

    void validate() const
    {
        if (num_layers == 0 || num_q_heads == 0 || num_kv_heads == 0 || head_dim == 0) {
            throw std::invalid_argument("model shape: all dimensions must be positive");
        }
        if (num_q_heads % num_kv_heads != 0) {
            throw std::invalid_argument("model shape: num_q_heads must be divisible by num_kv_heads");
        }
    }

    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Partial attention of n_q queries over one chunk of keys: the normalized
/// output and the log-sum-exp of the chunk's scores.
struct AttentionOutput {
    Matrix output;           // n_q × d
    std::vector<double> lse; // n_q; −∞ marks an empty chunk

    /// The neutral element of combine_chunks.
    [[nodiscard]] static AttentionOutput empty(std::size_t n_q, std::size_t d)
    {
        return {Matrix(n_q, d), std::vector<double>(n_q, -std::numeric_limits<double>::infinity())};
    }
};

[[nodiscard]] inline double attention_scale(std::size_t head_dim) noexcept
{
    return 1.0 / std::sqrt(static_cast<double>(head_dim));
}

/// softmax(Q Kᵀ / √d) V and the row log-sum-exp of the scaled scores.
[[nodiscard]] inline AttentionOutput attend(MatrixView queries, MatrixView keys, MatrixView values)
{
    if (keys.rows() == 0) { throw std::invalid_argument("empty cache"); }
    if (queries.cols() != keys.cols()) { throw std::invalid_argument("attend: query/key dimension mismatch"); }
    if (values.rows() != keys.rows()) { throw std::invalid_argument("attend: key/value row mismatch"); }
    const double scale = attention_scale(queries.cols());
    Matrix scores = matmul_nt(queries, keys);
    for (double& s : scores.flat()) { s *= scale; }
    auto sm = softmax_lse_rows(scores);
    return {matmul(sm.probs, values), std::move(sm.lse)};
}

/// Merge the partial attentions of two disjoint key chunks.
[[nodiscard]] inline AttentionOutput combine_chunks(const AttentionOutput& a, const AttentionOutput& b)
{
    require_same_shape(a.output, b.output, "combine_chunks");
    if (a.lse.size() != a.output.rows() || b.lse.size() != b.output.rows()) {
        throw std::invalid_argument("combine_chunks: lse length mismatch");
    }
    constexpr double neg_inf = -std::numeric_limits<double>::infinity();
    AttentionOutput out{Matrix(a.output.rows(), a.output.cols()), std::vector<double>(a.lse.size())};
    for (std::size_t i = 0; i < a.lse.size(); ++i) {
        const double la = a.lse[i];
        const double lb = b.lse[i];
        auto orow = out.output.row(i);
        if (la == neg_inf) {
            out.lse[i] = lb;
            std::copy(b.output.row(i).begin(), b.output.row(i).end(), orow.begin());
            continue;
        }
        if (lb == neg_inf) {
            out.lse[i] = la;
            std::copy(a.output.row(i).begin(), a.output.row(i).end(), orow.begin());
            continue;
        }
        const double mx = std::max(la, lb);
        const double ea = std::exp(la - mx);
        const double eb = std::exp(lb - mx);
        const double lse = mx + std::log(ea + eb);
        const double wa = std::exp(la - lse);
        const double wb = std::exp(lb - lse);
        auto ra = a.output.row(i);
        auto rb = b.output.row(i);
        for (std::size_t c = 0; c < orow.size(); ++c) { orow[c] = wa * ra[c] + wb * rb[c]; }
        out.lse[i] = lse;
    }
    return out;
}

/// Query heads served by a KV head: [kv·g, (kv+1)·g).
[[nodiscard]] inline std::vector<std::size_t> qheads_for_kv(const ModelShape& shape, std::size_t kv_head)
{
    if (kv_head >= shape.num_kv_heads) {
        throw std::out_of_range("kv head " + std::to_string(kv_head) + " out of range");
    }
    const std::size_t g = shape.group_size();
    std::vector<std::size_t> out(g);
    for (std::size_t i = 0; i < g; ++i) { out[i] = kv_head * g + i; }
    return out;
}

/// The g query matrices that attend through `kv_head`.
[[nodiscard]] inline std::vector<MatrixView> gqa_expand(const ModelShape& shape,
                                                        const std::vector<Matrix>& queries_by_qhead,
                                                        std::size_t kv_head)
{
    if (queries_by_qhead.size() != shape.num_q_heads) {
        throw std::invalid_argument("gqa_expand: expected one query matrix per query head");
    }
    std::vector<MatrixView> out;
    for (std::size_t qh : qheads_for_kv(shape, kv_head)) { out.push_back(queries_by_qhead[qh].view()); }
    return out;
}

} // namespace kvsculpt
