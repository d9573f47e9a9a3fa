#pragma once

// Per-head KV distillation: replace the compress zone of one KV head by k
// free (key, value) pairs that reproduce the full-cache attention output and
// log-sum-exp for a set of training queries.
//
// Loss, averaged over the g query heads of the group:
//   L = mean_h [ ‖Ŷ_h − Y_h‖²_F / n_q + λ ‖ℓ̂_h − ℓ_h‖² / n_q ]
// Keys are updated by L-BFGS with values frozen; values are re-solved in
// closed form by ridge regression every `v_solve_every` outer steps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "attention.hpp"
#include "cachestore.hpp"
#include "numkit.hpp"
#include "optim.hpp"
#include "queries.hpp"
#include "rng.hpp"

namespace kvsculpt {

struct DistillConfig {
    std::size_t outer_steps = 100;
    std::size_t v_solve_every = 5;
    double lbfgs_lr = 0.5;
    std::size_t lbfgs_inner_iters = 10;
    std::size_t lbfgs_history = 10;
    double lambda_lse = 1.0;
    double lambda_ridge = 1e-3;
    std::size_t n_synth = 128;
    std::uint64_t seed = 0;
    double wolfe_c1 = 1e-4;
    double wolfe_c2 = 0.9;
    std::size_t max_line_search = 20;
    AdamOptions adam{};
    std::size_t firstorder_iters = 10; ///< Adam updates per outer step

    void validate() const
    {
        if (outer_steps == 0 || v_solve_every == 0 || lbfgs_inner_iters == 0 || lbfgs_history == 0
            || firstorder_iters == 0) {
            throw std::invalid_argument("distill config: counts must be at least 1");
        }
        if (!(lbfgs_lr > 0.0) || !(lambda_lse > 0.0) || !(lambda_ridge > 0.0)) {
            throw std::invalid_argument("distill config: scalars must be positive");
        }
    }

    [[nodiscard]] LbfgsOptions lbfgs() const
    {
        LbfgsOptions o;
        o.initial_step = lbfgs_lr;
        o.max_iters = lbfgs_inner_iters;
        o.history = lbfgs_history;
        o.c1 = wolfe_c1;
        o.c2 = wolfe_c2;
        o.max_line_search = max_line_search;
        return o;
    }
};

/// Full-cache attention output and log-sum-exp per query head.
struct AttentionTarget {
    std::vector<Matrix> y_full;
    std::vector<std::vector<double>> lse_full;
};

[[nodiscard]] inline AttentionTarget attention_targets(MatrixView full_keys, MatrixView full_values,
                                                       std::span<const MatrixView> queries)
{
    AttentionTarget t;
    for (const auto& q : queries) {
        if (q.cols() != full_keys.cols()) { throw std::invalid_argument("attention targets: query dimension mismatch"); }
        auto out = attend(q, full_keys, full_values);
        t.y_full.push_back(std::move(out.output));
        t.lse_full.push_back(std::move(out.lse));
    }
    return t;
}

[[nodiscard]] inline AttentionTarget attention_targets(const ZoneSplit& zone, const QuerySet& queries)
{
    auto views = queries.views();
    return attention_targets(zone.full_keys, zone.full_values, views);
}

/// softmax(Q [K_c; K_ret]ᵀ/√d) for every query head, stacked row-wise.
/// Columns [0, k) are the compressed pairs, [k, k + m) the retained ones.
struct AttentionWeights {
    Matrix weights;
    std::size_t k = 0;
};

[[nodiscard]] inline AttentionWeights attention_weights(std::span<const MatrixView> queries, MatrixView k_c,
                                                        MatrixView k_ret)
{
    Matrix keys = vstack(k_c, k_ret);
    const double scale = attention_scale(keys.cols());
    std::vector<Matrix> blocks;
    std::vector<MatrixView> views;
    for (const auto& q : queries) {
        Matrix s = matmul_nt(q, keys);
        for (double& v : s.flat()) { v *= scale; }
        blocks.push_back(softmax_lse_rows(s).probs);
    }
    for (const auto& b : blocks) { views.push_back(b.view()); }
    return {vstack(views), k_c.rows()};
}

[[nodiscard]] inline Matrix stacked_targets(const AttentionTarget& target)
{
    std::vector<MatrixView> views;
    for (const auto& y : target.y_full) { views.push_back(y.view()); }
    return vstack(views);
}

/// Closed-form value update: ridge regression of the residual target
/// Y − A_r·V_ret on the compressed-pair weights A_c.
[[nodiscard]] inline Matrix solve_values(const AttentionWeights& w, MatrixView v_ret, MatrixView y_stacked,
                                         double lambda_ridge)
{
    const std::size_t k = w.k;
    const std::size_t rows = w.weights.rows();
    const std::size_t m = w.weights.cols() - k;
    if (v_ret.rows() != m) { throw std::invalid_argument("solve_values: retain values do not match weights"); }
    if (y_stacked.rows() != rows) { throw std::invalid_argument("solve_values: targets do not match weights"); }
    Matrix a_c(rows, k);
    Matrix a_r(rows, m);
    for (std::size_t i = 0; i < rows; ++i) {
        auto src = w.weights.row(i);
        std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(k), a_c.row(i).begin());
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(k), src.end(), a_r.row(i).begin());
    }
    Matrix offset = m > 0 ? matmul(a_r, v_ret) : Matrix(rows, y_stacked.cols());
    return ridge_solve({a_c, y_stacked, offset, lambda_ridge});
}

struct LossParts {
    double output_mse = 0.0; ///< mean over heads of ‖Ŷ − Y‖² / n_q
    double lse_term = 0.0;   ///< mean over heads of ‖ℓ̂ − ℓ‖² / n_q
    double total = 0.0;      ///< output_mse + λ·lse_term
};

/// The distillation objective for one KV head with the retain zone fixed.
/// The retain zone's partial attention is computed once; each evaluation
/// only attends over the k compressed pairs and merges the two chunks.
class HeadObjective {
  public:
    HeadObjective(std::span<const MatrixView> queries, MatrixView retain_keys, MatrixView retain_values,
                  const AttentionTarget& target, double lambda_lse)
        : target_{&target}, lambda_{lambda_lse}
    {
        if (queries.size() != target.y_full.size() || queries.empty()) {
            throw std::invalid_argument("objective: queries and targets disagree on head count");
        }
        d_ = retain_keys.cols();
        n_q_ = queries.front().rows();
        for (const auto& q : queries) {
            if (q.rows() != n_q_ || q.cols() != d_) { throw std::invalid_argument("objective: query shape mismatch"); }
            queries_.emplace_back(q);
            if (retain_keys.rows() > 0) {
                retain_.push_back(attend(q, retain_keys, retain_values));
            } else {
                retain_.push_back(AttentionOutput::empty(n_q_, d_));
            }
        }
        for (std::size_t h = 0; h < queries.size(); ++h) {
            if (target.y_full[h].rows() != n_q_ || target.y_full[h].cols() != d_ || target.lse_full[h].size() != n_q_) {
                throw std::invalid_argument("objective: target shape mismatch");
            }
        }
    }

    void set_values(Matrix v_c) { v_c_ = std::move(v_c); }
    [[nodiscard]] const Matrix& values() const noexcept { return v_c_; }
    [[nodiscard]] std::size_t head_dim() const noexcept { return d_; }
    [[nodiscard]] std::size_t evaluations() const noexcept { return evals_; }
    [[nodiscard]] std::size_t num_heads() const noexcept { return queries_.size(); }
    [[nodiscard]] std::size_t n_q() const noexcept { return n_q_; }

    /// Loss at keys `kc` (k·d, row-major); writes the analytic gradient.
    double operator()(std::span<const double> kc, std::span<double> grad)
    {
        ++evals_;
        return evaluate(kc, grad, nullptr);
    }

    [[nodiscard]] LossParts parts(std::span<const double> kc)
    {
        LossParts p;
        evaluate(kc, {}, &p);
        return p;
    }

  private:
    double evaluate(std::span<const double> kc, std::span<double> grad, LossParts* parts)
    {
        const std::size_t d = d_;
        const std::size_t k = kc.size() / d;
        if (kc.size() != k * d || k == 0 || v_c_.rows() != k || v_c_.cols() != d) {
            throw std::invalid_argument("objective: key/value shape mismatch");
        }
        const bool want_grad = !grad.empty();
        if (want_grad) { std::fill(grad.begin(), grad.end(), 0.0); }
        const double scale = attention_scale(d);
        const double g = static_cast<double>(queries_.size());
        const double nq = static_cast<double>(n_q_);
        const double* vc = v_c_.data();

        scores_.resize(k);
        out_.resize(d);
        gy_.resize(d);
        gv_.resize(k);

        double out_sum = 0.0;
        double lse_sum = 0.0;
        for (std::size_t h = 0; h < queries_.size(); ++h) {
            const Matrix& q = queries_[h];
            const AttentionOutput& ret = retain_[h];
            const Matrix& y = target_->y_full[h];
            const auto& lse_t = target_->lse_full[h];
            for (std::size_t i = 0; i < n_q_; ++i) {
                const double* qi = q.data() + i * d;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < k; ++j) {
                    const double* kj = kc.data() + j * d;
                    double s = 0.0;
                    for (std::size_t c = 0; c < d; ++c) { s += qi[c] * kj[c]; }
                    s *= scale;
                    scores_[j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    scores_[j] = std::exp(scores_[j] - mx);
                    z += scores_[j];
                }
                const double lse_c = mx + std::log(z);
                const double lse_r = ret.lse[i];
                const double hi = std::max(lse_c, lse_r);
                const double lse_hat = lse_r == -std::numeric_limits<double>::infinity()
                                           ? lse_c
                                           : hi + std::log(std::exp(lse_c - hi) + std::exp(lse_r - hi));
                const double w_c = std::exp(lse_c - lse_hat);
                const double w_r = lse_r == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(lse_r - lse_hat);
                // scores_ now holds w_c · P_c, the full-softmax weights of the compressed pairs
                const double norm = w_c / z;
                for (std::size_t j = 0; j < k; ++j) { scores_[j] *= norm; }
                const double* ro = ret.output.data() + i * d;
                for (std::size_t c = 0; c < d; ++c) { out_[c] = w_r * ro[c]; }
                for (std::size_t j = 0; j < k; ++j) {
                    const double a = scores_[j];
                    const double* vj = vc + j * d;
                    for (std::size_t c = 0; c < d; ++c) { out_[c] += a * vj[c]; }
                }
                const double* yi = y.data() + i * d;
                double res_sq = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    gy_[c] = out_[c] - yi[c];
                    res_sq += gy_[c] * gy_[c];
                }
                const double r_lse = lse_hat - lse_t[i];
                out_sum += res_sq;
                lse_sum += r_lse * r_lse;
                if (!want_grad) { continue; }

                const double coef = 2.0 / (g * nq);
                for (std::size_t c = 0; c < d; ++c) { gy_[c] *= coef; }
                const double g_lse = coef * lambda_ * r_lse;
                double gy_out = 0.0;
                for (std::size_t c = 0; c < d; ++c) { gy_out += gy_[c] * out_[c]; }
                for (std::size_t j = 0; j < k; ++j) {
                    const double* vj = vc + j * d;
                    double gv = 0.0;
                    for (std::size_t c = 0; c < d; ++c) { gv += gy_[c] * vj[c]; }
                    const double ds = scores_[j] * (gv - gy_out + g_lse) * scale;
                    double* gj = grad.data() + j * d;
                    for (std::size_t c = 0; c < d; ++c) { gj[c] += ds * qi[c]; }
                }
            }
        }
        LossParts p;
        p.output_mse = out_sum / (g * nq);
        p.lse_term = lse_sum / (g * nq);
        p.total = p.output_mse + lambda_ * p.lse_term;
        if (!std::isfinite(p.total)) { throw std::runtime_error("diverged"); }
        if (parts != nullptr) { *parts = p; }
        return p.total;
    }

    const AttentionTarget* target_;
    double lambda_;
    std::size_t d_ = 0;
    std::size_t n_q_ = 0;
    std::vector<Matrix> queries_;
    std::vector<AttentionOutput> retain_;
    Matrix v_c_;
    std::size_t evals_ = 0;
    std::vector<double> scores_, out_, gy_, gv_;
};

/// Loss and its gradient with respect to k_c for explicit inputs.
struct LossAndGrad {
    double loss = 0.0;
    Matrix grad_kc;
    LossParts parts;
};

[[nodiscard]] inline LossAndGrad distill_loss_and_grad(MatrixView k_c, MatrixView v_c, MatrixView retain_keys,
                                                       MatrixView retain_values, std::span<const MatrixView> queries,
                                                       const AttentionTarget& target, double lambda_lse)
{
    HeadObjective obj(queries, retain_keys, retain_values, target, lambda_lse);
    obj.set_values(Matrix(v_c));
    LossAndGrad out{0.0, Matrix(k_c.rows(), k_c.cols()), {}};
    out.loss = obj(k_c.flat(), out.grad_kc.flat());
    out.parts = obj.parts(k_c.flat());
    return out;
}

// ---------------------------------------------------------------------------
// Initialization

/// Σ over query heads and training queries of the full-cache attention
/// weight on each compress-zone position.
[[nodiscard]] inline std::vector<double> attention_importance(const ZoneSplit& zone,
                                                              std::span<const MatrixView> queries)
{
    std::vector<double> imp(zone.old_size(), 0.0);
    const double scale = attention_scale(zone.head_dim());
    for (const auto& q : queries) {
        Matrix s = matmul_nt(q, zone.full_keys);
        for (double& v : s.flat()) { v *= scale; }
        auto sm = softmax_lse_rows(s);
        for (std::size_t i = 0; i < sm.probs.rows(); ++i) {
            for (std::size_t j = 0; j < imp.size(); ++j) { imp[j] += sm.probs(i, j); }
        }
    }
    return imp;
}

/// Indices of the k largest scores, ties broken toward the larger index;
/// returned in ascending index order.
[[nodiscard]] inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k)
{
    if (k > scores.size()) { throw std::invalid_argument("budget exceeds zone"); }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) { return scores[a] > scores[b]; }
        return a > b;
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

struct InitialPairs {
    Matrix k_c;
    Matrix v_c;
    std::vector<std::size_t> indices; // compress-zone rows they were copied from
};

[[nodiscard]] inline InitialPairs pairs_from_indices(const ZoneSplit& zone, std::vector<std::size_t> idx)
{
    return {gather_rows(zone.old_keys, idx), gather_rows(zone.old_values, idx), std::move(idx)};
}

/// The k compress-zone pairs with the highest attention importance.
[[nodiscard]] inline InitialPairs init_keys_topk(const ZoneSplit& zone, const QuerySet& queries, std::size_t k)
{
    if (k > zone.old_size()) { throw std::invalid_argument("budget exceeds zone"); }
    auto views = queries.views();
    auto imp = attention_importance(zone, views);
    return pairs_from_indices(zone, top_k_indices(imp, k));
}

// ---------------------------------------------------------------------------
// Alternating optimization

enum class KeyOptimizer { lbfgs, first_order };

struct DistillTrace {
    std::vector<double> losses;            ///< total loss after each outer step
    std::vector<std::size_t> grad_evals;   ///< cumulative objective evaluations after each step
    std::vector<double> elapsed_ms;        ///< wall time after each step
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_output_mse = 0.0;
    double final_lse_term = 0.0;
    std::size_t total_grad_evals = 0;
    std::size_t v_solves = 0;
    std::size_t stalled_steps = 0;
    bool aborted = false;
    double wall_ms = 0.0;
};

struct DistillResult {
    CompressedHead head;
    DistillTrace trace;
};

/// Everything a head's distillation needs besides the budget.
struct HeadProblem {
    const ZoneSplit* zone;
    const QuerySet* queries;
    const AttentionTarget* target;
};

namespace detail {

inline Matrix solve_values_for(const HeadProblem& p, MatrixView k_c, double lambda_ridge)
{
    auto views = p.queries->views();
    auto w = attention_weights(views, k_c, p.zone->retain_keys);
    return solve_values(w, p.zone->retain_values, stacked_targets(*p.target), lambda_ridge);
}

} // namespace detail

/// Alternating K-step / V-step loop from explicit initial pairs.
[[nodiscard]] inline DistillResult distill_head_from(const HeadProblem& p, Matrix k_c, Matrix v_c,
                                                     const DistillConfig& cfg,
                                                     KeyOptimizer optimizer = KeyOptimizer::lbfgs)
{
    cfg.validate();
    if (k_c.rows() == 0 || k_c.rows() != v_c.rows()) { throw std::invalid_argument("distill: need k ≥ 1 initial pairs"); }
    const auto start = std::chrono::steady_clock::now();
    auto views = p.queries->views();
    HeadObjective obj(views, p.zone->retain_keys, p.zone->retain_values, *p.target, cfg.lambda_lse);
    obj.set_values(std::move(v_c));

    DistillTrace trace;
    trace.initial_loss = obj.parts(k_c.flat()).total;
    LbfgsState lbfgs_state;
    AdamState adam_state;
    const LbfgsOptions lopt = cfg.lbfgs();

    for (std::size_t step = 1; step <= cfg.outer_steps; ++step) {
        double loss = 0.0;
        if (optimizer == KeyOptimizer::lbfgs) {
            auto rep = lbfgs_run(obj, k_c.flat(), lopt, lbfgs_state);
            if (rep.stalled) { ++trace.stalled_steps; }
            loss = rep.f;
        } else {
            auto rep = adam_run(obj, k_c.flat(), cfg.firstorder_iters, cfg.adam, adam_state);
            if (rep.diverged) {
                trace.aborted = true;
                break;
            }
        }
        if (step % cfg.v_solve_every == 0) {
            obj.set_values(detail::solve_values_for(p, k_c, cfg.lambda_ridge));
            ++trace.v_solves;
            lbfgs_state.invalidate();
        }
        if (optimizer == KeyOptimizer::first_order || step % cfg.v_solve_every == 0) {
            loss = obj.parts(k_c.flat()).total;
        }
        trace.losses.push_back(loss);
        trace.grad_evals.push_back(obj.evaluations());
        trace.elapsed_ms.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
    }
    auto final_parts = obj.parts(k_c.flat());
    trace.final_loss = final_parts.total;
    trace.final_output_mse = final_parts.output_mse;
    trace.final_lse_term = final_parts.lse_term;
    if (!trace.aborted && !trace.losses.empty()) { trace.losses.back() = trace.final_loss; }
    trace.total_grad_evals = obj.evaluations();
    trace.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return {make_compressed(*p.zone, std::move(k_c), Matrix(obj.values())), std::move(trace)};
}

/// Top-k initialization followed by the alternating loop.
[[nodiscard]] inline DistillResult distill_head(const HeadProblem& p, std::size_t k, const DistillConfig& cfg,
                                                KeyOptimizer optimizer = KeyOptimizer::lbfgs)
{
    if (k == 0) { throw std::invalid_argument("distill: k must be at least 1"); }
    auto init = init_keys_topk(*p.zone, *p.queries, k);
    return distill_head_from(p, std::move(init.k_c), std::move(init.v_c), cfg, optimizer);
}

[[nodiscard]] inline DistillResult distill_head(const ZoneSplit& zone, const QuerySet& queries, std::size_t k,
                                                const DistillConfig& cfg)
{
    auto target = attention_targets(zone, queries);
    return distill_head({&zone, &queries, &target}, k, cfg);
}

struct RestartResult {
    DistillResult best;
    std::size_t best_restart = 0;
    std::vector<DistillTrace> traces;
};

/// Restart 0 uses the top-k initialization; restart r ≥ 1 starts from k
/// compress-zone pairs drawn uniformly without replacement with a seed
/// derived from (cfg.seed, r). Returns the lowest final loss.
[[nodiscard]] inline RestartResult restart_oracle(const HeadProblem& p, std::size_t k, const DistillConfig& cfg,
                                                  std::size_t restarts)
{
    if (restarts == 0) { throw std::invalid_argument("restart oracle: restarts must be at least 1"); }
    if (k > p.zone->old_size()) { throw std::invalid_argument("budget exceeds zone"); }
    RestartResult out;
    for (std::size_t r = 0; r < restarts; ++r) {
        DistillResult res;
        if (r == 0) {
            res = distill_head(p, k, cfg);
        } else {
            Rng rng{derive_seed(cfg.seed, 0x7265737461727473ULL, r)};
            auto idx = rng.sample_without_replacement(p.zone->old_size(), k);
            std::sort(idx.begin(), idx.end());
            auto init = pairs_from_indices(*p.zone, std::move(idx));
            res = distill_head_from(p, std::move(init.k_c), std::move(init.v_c), cfg);
        }
        out.traces.push_back(res.trace);
        if (r == 0 || res.trace.final_loss < out.best.trace.final_loss) {
            out.best = std::move(res);
            out.best_restart = r;
        }
    }
    return out;
}

/// One JSON-lines record per outer step.
[[nodiscard]] inline std::vector<nlohmann::json> trace_records(const DistillTrace& t, std::size_t layer,
                                                               std::size_t head)
{
    std::vector<nlohmann::json> out;
    for (std::size_t s = 0; s < t.losses.size(); ++s) {
        out.push_back({{"layer", layer},
                       {"head", head},
                       {"step", s + 1},
                       {"loss", t.losses[s]},
                       {"grad_evals", t.grad_evals[s]},
                       {"elapsed_ms", t.elapsed_ms[s]}});
    }
    return out;
}

} // namespace kvsculpt
