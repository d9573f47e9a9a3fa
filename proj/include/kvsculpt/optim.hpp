#pragma once

// Unconstrained minimizers over a flat parameter vector: L-BFGS (two-loop
// recursion, strong Wolfe line search) and Adam. Objectives are callables
// `double f(std::span<const double> x, std::span<double> grad)`.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "numkit.hpp"

namespace kvsculpt {

struct LbfgsOptions {
    double initial_step = 0.5;          ///< first trial step of each line search
    std::size_t max_iters = 10;         ///< quasi-Newton iterations per call
    std::size_t history = 10;           ///< stored (s, y) pairs
    double c1 = 1e-4;                   ///< sufficient decrease
    double c2 = 0.9;                    ///< curvature
    std::size_t max_line_search = 20;   ///< function evaluations per line search
    double grad_tol = 1e-12;            ///< stop when max |g| falls below this

    void validate() const
    {
        if (!(initial_step > 0.0) || max_iters == 0 || history == 0 || max_line_search == 0) {
            throw std::invalid_argument("lbfgs: step, iterations, history and line-search budget must be positive");
        }
        if (!(0.0 < c1 && c1 < c2 && c2 < 1.0)) { throw std::invalid_argument("lbfgs: need 0 < c1 < c2 < 1"); }
    }
};

/// Curvature history and the cached value/gradient at the current point.
/// Persisting it across calls lets consecutive calls continue one run;
/// invalidate() after the objective changes.
struct LbfgsState {
    struct Pair {
        std::vector<double> s;
        std::vector<double> y;
        double rho = 0.0;
    };
    std::deque<Pair> pairs;
    bool has_point = false;
    double f = 0.0;
    std::vector<double> g;

    void reset_history() { pairs.clear(); }
    void invalidate()
    {
        pairs.clear();
        has_point = false;
    }
};

struct LbfgsReport {
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    bool stalled = false;   ///< a line search failed; the point was kept
    bool converged = false; ///< gradient below tolerance
    double f = 0.0;
};

namespace detail {

/// Minimizer of the cubic through (x1, f1, g1), (x2, f2, g2), clamped to
/// [lo, hi]; bisects when the cubic has no real minimizer.
inline double cubic_interpolate(double x1, double f1, double g1, double x2, double f2, double g2, double lo, double hi)
{
    if (lo > hi) { std::swap(lo, hi); }
    const double d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    const double d2_sq = d1 * d1 - g1 * g2;
    if (d2_sq >= 0.0 && std::isfinite(d2_sq)) {
        const double d2 = std::sqrt(d2_sq);
        const double pos = x1 <= x2 ? x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
                                    : x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2));
        if (std::isfinite(pos)) { return std::clamp(pos, lo, hi); }
    }
    return 0.5 * (lo + hi);
}

struct LineSearchResult {
    bool ok = false;
    double t = 0.0;
    double f = 0.0;
    std::size_t evaluations = 0;
};

/// Strong Wolfe line search (bracketing then zoom). On success `x_out` and
/// `g_out` hold the accepted point and its gradient. When the evaluation
/// budget runs out, the best sufficient-decrease point found is accepted;
/// if there is none the search fails.
template <class F>
LineSearchResult strong_wolfe(F& fg, std::span<const double> x0, double f0, std::span<const double> g0,
                              std::span<const double> dir, double t0, const LbfgsOptions& opt,
                              std::vector<double>& x_out, std::vector<double>& g_out)
{
    const std::size_t n = x0.size();
    const double dphi0 = dot(g0, dir);
    std::vector<double> xt(n);
    std::vector<double> gt(n);
    LineSearchResult res;

    // best sufficient-decrease point seen so far
    double best_t = 0.0;
    double best_f = f0;
    bool have_best = false;

    auto eval = [&](double t, double& ft, double& dphit) {
        for (std::size_t i = 0; i < n; ++i) { xt[i] = x0[i] + t * dir[i]; }
        ft = fg(std::span<const double>{xt}, std::span<double>{gt});
        ++res.evaluations;
        dphit = dot(gt, dir);
        if (std::isfinite(ft) && ft <= f0 + opt.c1 * t * dphi0 && ft < best_f) {
            best_t = t;
            best_f = ft;
            have_best = true;
            x_out = xt;
            g_out = gt;
        }
    };
    auto wolfe = [&](double t, double ft, double dphit) {
        return std::isfinite(ft) && ft <= f0 + opt.c1 * t * dphi0 && std::abs(dphit) <= -opt.c2 * dphi0;
    };
    auto accept = [&](double t, double ft) {
        res.ok = true;
        res.t = t;
        res.f = ft;
        x_out = xt;
        g_out = gt;
        return res;
    };

    double t_prev = 0.0;
    double f_prev = f0;
    double d_prev = dphi0;
    double t = t0;
    double lo = 0.0, f_lo = f0, d_lo = dphi0;
    double hi = 0.0, f_hi = f0, d_hi = dphi0;
    bool bracketed = false;

    for (std::size_t iter = 0; res.evaluations < opt.max_line_search; ++iter) {
        double ft = 0.0;
        double dphit = 0.0;
        eval(t, ft, dphit);
        if (!std::isfinite(ft) || ft > f0 + opt.c1 * t * dphi0 || (iter > 0 && ft >= f_prev)) {
            lo = t_prev, f_lo = f_prev, d_lo = d_prev;
            hi = t, f_hi = ft, d_hi = dphit;
            bracketed = true;
            break;
        }
        if (wolfe(t, ft, dphit)) { return accept(t, ft); }
        if (dphit >= 0.0) {
            lo = t, f_lo = ft, d_lo = dphit;
            hi = t_prev, f_hi = f_prev, d_hi = d_prev;
            bracketed = true;
            break;
        }
        const double next = cubic_interpolate(t_prev, f_prev, d_prev, t, ft, dphit, t + 0.01 * (t - t_prev), 10.0 * t);
        t_prev = t, f_prev = ft, d_prev = dphit;
        t = next;
    }

    if (bracketed) {
        while (res.evaluations < opt.max_line_search) {
            const double width = std::abs(hi - lo);
            if (width * std::max(1.0, norm2(dir)) < 1e-16) { break; }
            double tz = std::isfinite(f_hi) ? cubic_interpolate(lo, f_lo, d_lo, hi, f_hi, d_hi, lo, hi)
                                            : 0.5 * (lo + hi);
            const double a = std::min(lo, hi);
            const double b = std::max(lo, hi);
            if (tz - a < 0.1 * width || b - tz < 0.1 * width) { tz = 0.5 * (lo + hi); }
            double ft = 0.0;
            double dphit = 0.0;
            eval(tz, ft, dphit);
            if (!std::isfinite(ft) || ft > f0 + opt.c1 * tz * dphi0 || ft >= f_lo) {
                hi = tz, f_hi = ft, d_hi = dphit;
            } else {
                if (wolfe(tz, ft, dphit)) { return accept(tz, ft); }
                if (dphit * (hi - lo) >= 0.0) { hi = lo, f_hi = f_lo, d_hi = d_lo; }
                lo = tz, f_lo = ft, d_lo = dphit;
            }
        }
    }

    if (have_best && best_t > 0.0) {
        res.ok = true;
        res.t = best_t;
        res.f = best_f;
    }
    return res;
}

} // namespace detail

/// Runs up to opt.max_iters L-BFGS iterations from x, updating x in place.
/// The objective is never increased by an accepted step.
template <class F>
LbfgsReport lbfgs_run(F&& fg, std::span<double> x, const LbfgsOptions& opt, LbfgsState& state)
{
    opt.validate();
    const std::size_t n = x.size();
    LbfgsReport rep;
    if (!state.has_point || state.g.size() != n) {
        state.g.assign(n, 0.0);
        state.f = fg(std::span<const double>{x.data(), n}, std::span<double>{state.g});
        ++rep.evaluations;
        state.has_point = true;
    }
    rep.f = state.f;
    if (!std::isfinite(state.f)) { throw std::runtime_error("diverged"); }

    std::vector<double> dir(n);
    std::vector<double> alpha(opt.history);
    std::vector<double> x_new(n);
    std::vector<double> g_new(n);

    for (std::size_t it = 0; it < opt.max_iters; ++it) {
        double gmax = 0.0;
        double gl1 = 0.0;
        for (double v : state.g) {
            gmax = std::max(gmax, std::abs(v));
            gl1 += std::abs(v);
        }
        if (gmax <= opt.grad_tol) {
            rep.converged = true;
            break;
        }

        // two-loop recursion: dir = −H·g
        std::copy(state.g.begin(), state.g.end(), dir.begin());
        const std::size_t h = state.pairs.size();
        for (std::size_t i = h; i-- > 0;) {
            const auto& p = state.pairs[i];
            alpha[i] = p.rho * dot(p.s, dir);
            for (std::size_t j = 0; j < n; ++j) { dir[j] -= alpha[i] * p.y[j]; }
        }
        if (h > 0) {
            const auto& last = state.pairs.back();
            const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
            for (double& v : dir) { v *= gamma; }
        }
        for (std::size_t i = 0; i < h; ++i) {
            const auto& p = state.pairs[i];
            const double beta = p.rho * dot(p.y, dir);
            for (std::size_t j = 0; j < n; ++j) { dir[j] += p.s[j] * (alpha[i] - beta); }
        }
        for (double& v : dir) { v = -v; }

        double dphi0 = dot(state.g, dir);
        if (!(dphi0 < 0.0)) {
            // not a descent direction: fall back to steepest descent
            state.reset_history();
            for (std::size_t j = 0; j < n; ++j) { dir[j] = -state.g[j]; }
            dphi0 = dot(state.g, dir);
        }
        const double t0 = state.pairs.empty() ? std::min(1.0, 1.0 / gl1) * opt.initial_step : opt.initial_step;

        auto ls = detail::strong_wolfe(fg, std::span<const double>{x.data(), n}, state.f, state.g, dir, t0, opt,
                                       x_new, g_new);
        rep.evaluations += ls.evaluations;
        if (!ls.ok) {
            rep.stalled = true;
            state.reset_history();
            break;
        }
        LbfgsState::Pair p{std::vector<double>(n), std::vector<double>(n), 0.0};
        for (std::size_t j = 0; j < n; ++j) {
            p.s[j] = x_new[j] - x[j];
            p.y[j] = g_new[j] - state.g[j];
        }
        const double sy = dot(p.s, p.y);
        if (sy > 1e-10 * dot(p.y, p.y) && sy > 0.0) {
            p.rho = 1.0 / sy;
            state.pairs.push_back(std::move(p));
            if (state.pairs.size() > opt.history) { state.pairs.pop_front(); }
        }
        std::copy(x_new.begin(), x_new.end(), x.begin());
        state.g = g_new;
        const double f_old = state.f;
        state.f = ls.f;
        rep.f = ls.f;
        ++rep.iterations;
        if (f_old - ls.f <= 1e-16 * std::max(1.0, std::abs(f_old)) && rep.iterations > 1) { break; }
    }
    return rep;
}

struct AdamOptions {
    double step = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double divergence_factor = 1e6; ///< abort when f exceeds this multiple of the first loss
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t t = 0;
    double reference_loss = -1.0;
};

struct AdamReport {
    std::size_t evaluations = 0;
    bool diverged = false;
    double f = 0.0; ///< loss at the last evaluated point (before its update)
};

/// `steps` Adam updates, one gradient evaluation each.
template <class F>
AdamReport adam_run(F&& fg, std::span<double> x, std::size_t steps, const AdamOptions& opt, AdamState& state)
{
    const std::size_t n = x.size();
    if (state.m.size() != n) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
        state.t = 0;
    }
    AdamReport rep;
    std::vector<double> g(n);
    for (std::size_t s = 0; s < steps; ++s) {
        const double f = fg(std::span<const double>{x.data(), n}, std::span<double>{g});
        ++rep.evaluations;
        rep.f = f;
        if (state.reference_loss < 0.0) { state.reference_loss = f; }
        if (!std::isfinite(f) || f > opt.divergence_factor * std::max(state.reference_loss, 1e-300)) {
            rep.diverged = true;
            return rep;
        }
        ++state.t;
        const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
        const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
        for (std::size_t j = 0; j < n; ++j) {
            state.m[j] = opt.beta1 * state.m[j] + (1.0 - opt.beta1) * g[j];
            state.v[j] = opt.beta2 * state.v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            const double mh = state.m[j] / bc1;
            const double vh = state.v[j] / bc2;
            x[j] -= opt.step * mh / (std::sqrt(vh) + opt.eps);
        }
    }
    return rep;
}

} // namespace kvsculpt
