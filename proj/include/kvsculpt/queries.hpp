#pragma once

// Training-query construction: retain-zone queries at their own positions
// plus synthetic future queries built from de-rotated content vectors, and
// the stationarity diagnostics of those content vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "numkit.hpp"
#include "rng.hpp"
#include "rope.hpp"

namespace kvsculpt {

/// How synthetic content vectors are drawn from the context.
enum class QueryStrategy {
    uniform,   ///< evenly spaced indices floor(j·N/n_s)
    bootstrap, ///< the most recent n_s tokens
    random,    ///< seeded sample without replacement
    kmeans,    ///< seeded Lloyd centroids
    farthest,  ///< greedy farthest-point sampling
};

[[nodiscard]] inline std::string_view to_string(QueryStrategy s) noexcept
{
    switch (s) {
    case QueryStrategy::uniform: return "uniform";
    case QueryStrategy::bootstrap: return "bootstrap";
    case QueryStrategy::random: return "random";
    case QueryStrategy::kmeans: return "kmeans";
    case QueryStrategy::farthest: return "farthest";
    }
    return "uniform";
}

[[nodiscard]] inline QueryStrategy parse_query_strategy(std::string_view s)
{
    for (auto v : {QueryStrategy::uniform, QueryStrategy::bootstrap, QueryStrategy::random, QueryStrategy::kmeans,
                   QueryStrategy::farthest}) {
        if (s == to_string(v)) { return v; }
    }
    throw std::invalid_argument("unknown query strategy: " + std::string{s});
}

/// Training queries for the g query heads of one KV head. All heads share
/// positions: m retain positions followed by n_s future positions.
struct QuerySet {
    std::vector<Matrix> per_head; // each n_q × d
    std::vector<std::int64_t> positions;
    std::size_t n_retain = 0;
    std::size_t n_synth = 0;

    [[nodiscard]] std::size_t n_q() const noexcept { return n_retain + n_synth; }
    [[nodiscard]] std::size_t num_heads() const noexcept { return per_head.size(); }
    [[nodiscard]] std::vector<MatrixView> views() const
    {
        std::vector<MatrixView> v;
        for (const auto& m : per_head) { v.push_back(m.view()); }
        return v;
    }
};

/// Evenly spaced source indices floor(j·N/n_s).
[[nodiscard]] inline std::vector<std::size_t> uniform_indices(std::size_t n, std::size_t n_s)
{
    if (n_s > n) { throw std::invalid_argument("not enough content vectors"); }
    std::vector<std::size_t> idx(n_s);
    for (std::size_t j = 0; j < n_s; ++j) { idx[j] = (j * n) / n_s; }
    return idx;
}

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) noexcept
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

inline Matrix kmeans_centroids(MatrixView x, std::size_t k, std::uint64_t seed, int iterations = 25)
{
    Rng rng{seed};
    auto init = rng.sample_without_replacement(x.rows(), k);
    std::sort(init.begin(), init.end());
    Matrix c = gather_rows(x, init);
    std::vector<std::size_t> assign(x.rows(), 0);
    for (int it = 0; it < iterations; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double dd = sq_dist(x.row(i), c.row(j));
                if (dd < best_d) {
                    best_d = dd;
                    best = j;
                }
            }
            changed = changed || assign[i] != best;
            assign[i] = best;
        }
        Matrix sum(k, x.cols());
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            auto s = sum.row(assign[i]);
            auto r = x.row(i);
            for (std::size_t d = 0; d < r.size(); ++d) { s[d] += r[d]; }
            ++count[assign[i]];
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (count[j] == 0) { continue; } // empty cluster keeps its centroid
            auto cj = c.row(j);
            auto s = sum.row(j);
            for (std::size_t d = 0; d < cj.size(); ++d) { cj[d] = s[d] / static_cast<double>(count[j]); }
        }
        if (!changed && it > 0) { break; }
    }
    return c;
}

inline std::vector<std::size_t> farthest_point_indices(MatrixView x, std::size_t k)
{
    std::vector<std::size_t> chosen;
    if (k == 0) { return chosen; }
    std::vector<double> mind(x.rows(), std::numeric_limits<double>::infinity());
    std::size_t next = 0;
    for (std::size_t s = 0; s < k; ++s) {
        chosen.push_back(next);
        for (std::size_t i = 0; i < x.rows(); ++i) { mind[i] = std::min(mind[i], sq_dist(x.row(i), x.row(next))); }
        double best = -1.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            if (mind[i] > best) {
                best = mind[i];
                next = i;
            }
        }
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

} // namespace detail

/// n_s content vectors chosen from `contents` (N × d, already de-rotated).
[[nodiscard]] inline Matrix synthetic_contents(MatrixView contents, std::size_t n_s, QueryStrategy strategy,
                                               std::uint64_t seed)
{
    const std::size_t n = contents.rows();
    if (n_s > n) { throw std::invalid_argument("not enough content vectors"); }
    switch (strategy) {
    case QueryStrategy::uniform: return gather_rows(contents, uniform_indices(n, n_s));
    case QueryStrategy::bootstrap: {
        std::vector<std::size_t> idx(n_s);
        for (std::size_t j = 0; j < n_s; ++j) { idx[j] = n - n_s + j; }
        return gather_rows(contents, idx);
    }
    case QueryStrategy::random: {
        Rng rng{seed};
        auto idx = rng.sample_without_replacement(n, n_s);
        std::sort(idx.begin(), idx.end());
        return gather_rows(contents, idx);
    }
    case QueryStrategy::kmeans:
        if (n_s == 0) { return Matrix(0, contents.cols()); }
        return detail::kmeans_centroids(contents, n_s, seed);
    case QueryStrategy::farthest: return gather_rows(contents, detail::farthest_point_indices(contents, n_s));
    }
    throw std::invalid_argument("unknown query strategy");
}

/// Synthetic future queries: de-rotate context queries at their positions,
/// pick n_s content vectors, re-rotate them at positions N, N+1, ….
[[nodiscard]] inline Matrix sample_synthetic_queries(MatrixView context_queries, std::span<const std::int64_t> positions,
                                                     std::size_t n, std::size_t n_s, const RopeConfig& rope,
                                                     QueryStrategy strategy = QueryStrategy::uniform,
                                                     std::uint64_t seed = 0)
{
    if (context_queries.rows() != n || positions.size() != n) {
        throw std::invalid_argument("synthetic queries: context length mismatch");
    }
    if (n_s > n) { throw std::invalid_argument("not enough content vectors"); }
    Matrix contents = rope_invert_rows(context_queries, positions, rope);
    Matrix out = synthetic_contents(contents, n_s, strategy, seed);
    for (std::size_t j = 0; j < out.rows(); ++j) {
        rope_apply_in_place(out.row(j), static_cast<std::int64_t>(n + j), rope);
    }
    return out;
}

/// Retain-zone queries (last m rows, original positions) followed by n_s
/// synthetic future queries, for each query head.
[[nodiscard]] inline QuerySet build_training_queries(std::span<const MatrixView> context_queries,
                                                     std::span<const std::int64_t> positions, std::size_t n,
                                                     std::size_t m, std::size_t n_s, const RopeConfig& rope,
                                                     QueryStrategy strategy = QueryStrategy::uniform,
                                                     std::uint64_t seed = 0)
{
    if (n_s > n) { throw std::invalid_argument("not enough content vectors"); }
    if (m == 0 || m >= n) { throw std::invalid_argument("invalid retain size"); }
    if (positions.size() != n) { throw std::invalid_argument("training queries: positions length != N"); }
    QuerySet qs;
    qs.n_retain = m;
    qs.n_synth = n_s;
    qs.positions.assign(positions.end() - static_cast<std::ptrdiff_t>(m), positions.end());
    for (std::size_t j = 0; j < n_s; ++j) { qs.positions.push_back(static_cast<std::int64_t>(n + j)); }
    for (const auto& q : context_queries) {
        if (q.rows() != n) { throw std::invalid_argument("training queries: context length mismatch"); }
        Matrix retain(q.row_block(n - m, m));
        if (n_s == 0) {
            qs.per_head.push_back(std::move(retain));
            continue;
        }
        Matrix synth = sample_synthetic_queries(q, positions, n, n_s, rope, strategy, seed);
        qs.per_head.push_back(vstack(retain, synth));
    }
    return qs;
}

struct StationarityReport {
    double mean_consecutive_cosine = 0.0;
    double pca_variance_captured = 0.0;
    std::size_t effective_dim = 0;
};

[[nodiscard]] inline double cosine(std::span<const double> a, std::span<const double> b) noexcept
{
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) { return (na == 0.0 && nb == 0.0) ? 1.0 : 0.0; }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Consecutive-cosine and PCA spectrum of the de-rotated content vectors.
/// effective_dim is the smallest number of principal components whose
/// variance share reaches `threshold`; a zero-variance set reports 1.
[[nodiscard]] inline StationarityReport stationarity_report(MatrixView context_queries,
                                                            std::span<const std::int64_t> positions,
                                                            const RopeConfig& rope, double threshold = 0.9)
{
    const std::size_t n = context_queries.rows();
    if (n < 2) { throw std::invalid_argument("stationarity needs at least two queries"); }
    if (!(threshold > 0.0 && threshold <= 1.0)) { throw std::invalid_argument("threshold must lie in (0, 1]"); }
    Matrix c = rope_invert_rows(context_queries, positions, rope);
    StationarityReport rep;
    double sum = 0.0;
    for (std::size_t i = 1; i < n; ++i) { sum += cosine(c.row(i - 1), c.row(i)); }
    rep.mean_consecutive_cosine = sum / static_cast<double>(n - 1);

    const std::size_t d = c.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) { mean[j] += c(i, j) / static_cast<double>(n); }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) { c(i, j) -= mean[j]; }
    }
    Matrix cov = matmul_tn(c, c);
    for (double& v : cov.flat()) { v /= static_cast<double>(n); }
    auto eig = symmetric_eigen(cov);
    double total = 0.0;
    for (double ev : eig.values) { total += std::max(ev, 0.0); }
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) { scale += frobenius_sq(context_queries.row_block(i, 1)); }
    if (total <= 1e-24 * std::max(scale, 1e-300)) {
        rep.effective_dim = 1;
        rep.pca_variance_captured = 1.0;
        return rep;
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < eig.values.size(); ++j) {
        acc += std::max(eig.values[j], 0.0);
        if (acc / total >= threshold - 1e-12) {
            rep.effective_dim = j + 1;
            rep.pca_variance_captured = std::min(acc / total, 1.0);
            return rep;
        }
    }
    rep.effective_dim = d;
    rep.pca_variance_captured = 1.0;
    return rep;
}

} // namespace kvsculpt
