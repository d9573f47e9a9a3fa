#pragma once

// A small seeded GQA transformer used as the evaluation substrate.
// Pre-norm blocks (RMS normalization without gain), RoPE attention, SiLU
// feed-forward, untied output head.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "attention.hpp"
#include "cachestore.hpp"
#include "numkit.hpp"
#include "rng.hpp"
#include "rope.hpp"

namespace kvsculpt {

struct ToyModelConfig {
    ModelShape shape{4, 4, 2, 16};
    std::size_t vocab = 64;
    std::size_t hidden = 64;
    std::size_t ffn = 128;
    RopeConfig rope{};
    std::uint64_t seed = 0;
    double weight_scale = 1.0;
    // Query gain ramps linearly from the first to the last layer so that
    // layers differ in attention sharpness.
    double qk_gain_first = 0.2;
    double qk_gain_last = 0.45;
    // Shared per-head query/key offsets, relative to the projection scale.
    // They make de-rotated queries nearly stationary, as in trained models.
    double q_bias = 2.0;
    double k_bias = 2.0;
    // A seeded subset of the vocabulary whose keys are pushed along the
    // group's mean query direction, giving heavy-hitter positions.
    double sink_fraction = 0.03;
    double sink_strength = 5.0;
    // Optional topic drift in sampled text: every `topic_period` tokens one
    // of `topic_count` vocabulary slices gets a logit boost. 0 disables it.
    std::size_t topic_period = 0;
    std::size_t topic_count = 4;
    double topic_strength = 6.0;

    void validate() const
    {
        shape.validate();
        rope.validate();
        if (rope.head_dim != shape.head_dim) { throw std::invalid_argument("toy model: rope head_dim != head_dim"); }
        if (hidden != shape.num_q_heads * shape.head_dim) {
            throw std::invalid_argument("toy model: hidden must equal num_q_heads × head_dim");
        }
        if (vocab < 8) { throw std::invalid_argument("toy model: vocab must be at least 8"); }
        if (ffn == 0 || !(weight_scale > 0.0) || !(qk_gain_first > 0.0) || !(qk_gain_last > 0.0)) {
            throw std::invalid_argument("toy model: ffn, weight_scale and gains must be positive");
        }
        if (!(q_bias >= 0.0) || !(k_bias >= 0.0) || !(sink_strength >= 0.0)) {
            throw std::invalid_argument("toy model: biases must be non-negative");
        }
        if (!(sink_fraction >= 0.0 && sink_fraction <= 1.0)) {
            throw std::invalid_argument("toy model: sink_fraction must lie in [0, 1]");
        }
        if (topic_count == 0 || topic_count > vocab || !(topic_strength >= 0.0)) {
            throw std::invalid_argument("toy model: invalid topic settings");
        }
    }
};

[[nodiscard]] inline nlohmann::json to_json(const ToyModelConfig& c)
{
    return {{"layers", c.shape.num_layers},
            {"q_heads", c.shape.num_q_heads},
            {"kv_heads", c.shape.num_kv_heads},
            {"head_dim", c.shape.head_dim},
            {"vocab", c.vocab},
            {"hidden", c.hidden},
            {"ffn", c.ffn},
            {"theta_base", c.rope.theta_base},
            {"pairing", std::string{to_string(c.rope.pairing)}},
            {"seed", c.seed},
            {"weight_scale", c.weight_scale},
            {"qk_gain_first", c.qk_gain_first},
            {"qk_gain_last", c.qk_gain_last},
            {"q_bias", c.q_bias},
            {"k_bias", c.k_bias},
            {"sink_fraction", c.sink_fraction},
            {"sink_strength", c.sink_strength},
            {"topic_period", c.topic_period},
            {"topic_count", c.topic_count},
            {"topic_strength", c.topic_strength}};
}

[[nodiscard]] inline ToyModelConfig toy_config_from_json(const nlohmann::json& j)
{
    ToyModelConfig c;
    c.shape = {j.at("layers").get<std::size_t>(), j.at("q_heads").get<std::size_t>(),
               j.at("kv_heads").get<std::size_t>(), j.at("head_dim").get<std::size_t>()};
    c.vocab = j.at("vocab").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.ffn = j.at("ffn").get<std::size_t>();
    c.rope = {c.shape.head_dim, j.at("theta_base").get<double>(), parse_pairing(j.at("pairing").get<std::string>())};
    c.seed = j.at("seed").get<std::uint64_t>();
    c.weight_scale = j.at("weight_scale").get<double>();
    c.qk_gain_first = j.at("qk_gain_first").get<double>();
    c.qk_gain_last = j.at("qk_gain_last").get<double>();
    c.q_bias = j.at("q_bias").get<double>();
    c.k_bias = j.at("k_bias").get<double>();
    c.sink_fraction = j.at("sink_fraction").get<double>();
    c.sink_strength = j.at("sink_strength").get<double>();
    c.topic_period = j.value("topic_period", c.topic_period);
    c.topic_count = j.value("topic_count", c.topic_count);
    c.topic_strength = j.value("topic_strength", c.topic_strength);
    c.validate();
    return c;
}

struct ToyLayer {
    Matrix wq; // hidden × h_q·d
    Matrix bq; // 1 × h_q·d
    Matrix bk; // 1 × h_kv·d
    Matrix sink; // 1 × h_kv·d, added to the keys of sink tokens
    Matrix wk; // hidden × h_kv·d
    Matrix wv; // hidden × h_kv·d
    Matrix wo; // h_q·d × hidden
    Matrix w1; // hidden × ffn
    Matrix w2; // ffn × hidden
};

struct ToyModel {
    ToyModelConfig config;
    Matrix embed; // vocab × hidden
    std::vector<ToyLayer> layers;
    Matrix head; // hidden × vocab
    std::vector<bool> is_sink; // per token id

    [[nodiscard]] bool sink(std::int32_t token) const { return is_sink[static_cast<std::size_t>(token)]; }
};

namespace detail {

inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev)
{
    Matrix m(rows, cols);
    for (double& v : m.flat()) { v = stddev * rng.normal(); }
    return m;
}

inline void rms_normalize(std::span<double> x)
{
    double ss = 0.0;
    for (double v : x) { ss += v * v; }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    for (double& v : x) { v *= inv; }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

// y = x·W for a single row x.
inline void row_matmul(std::span<const double> x, const Matrix& w, std::span<double> y)
{
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        auto wr = w.row(i);
        for (std::size_t j = 0; j < y.size(); ++j) { y[j] += xi * wr[j]; }
    }
}

} // namespace detail

[[nodiscard]] inline ToyModel build_toy_model(const ToyModelConfig& config)
{
    config.validate();
    ToyModel m;
    m.config = config;
    Rng rng{derive_seed(config.seed, 0x746f79ULL)};
    const auto& s = config.shape;
    const std::size_t hd = config.hidden;
    const double scale = config.weight_scale / std::sqrt(static_cast<double>(hd));
    m.embed = detail::gaussian(rng, config.vocab, hd, 1.0);
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        const double frac = s.num_layers > 1 ? static_cast<double>(l) / static_cast<double>(s.num_layers - 1) : 0.0;
        const double gain = config.qk_gain_first + frac * (config.qk_gain_last - config.qk_gain_first);
        ToyLayer layer;
        layer.wq = detail::gaussian(rng, hd, s.num_q_heads * s.head_dim, scale * gain);
        layer.wk = detail::gaussian(rng, hd, s.num_kv_heads * s.head_dim, scale);
        layer.wv = detail::gaussian(rng, hd, s.num_kv_heads * s.head_dim, scale);
        layer.wo = detail::gaussian(rng, s.num_q_heads * s.head_dim, hd,
                                    config.weight_scale / std::sqrt(static_cast<double>(s.num_q_heads * s.head_dim)));
        layer.w1 = detail::gaussian(rng, hd, config.ffn, scale);
        layer.w2 = detail::gaussian(rng, config.ffn, hd, config.weight_scale / std::sqrt(static_cast<double>(config.ffn)));
        layer.bq = detail::gaussian(rng, 1, s.num_q_heads * s.head_dim, config.q_bias * config.weight_scale * gain);
        layer.bk = detail::gaussian(rng, 1, s.num_kv_heads * s.head_dim, config.k_bias * config.weight_scale);
        // unit mean query-bias direction of each group, scaled
        layer.sink = Matrix(1, s.num_kv_heads * s.head_dim);
        const std::size_t g = s.group_size();
        for (std::size_t kh = 0; kh < s.num_kv_heads; ++kh) {
            std::vector<double> u(s.head_dim, 0.0);
            for (std::size_t qh = kh * g; qh < (kh + 1) * g; ++qh) {
                for (std::size_t e = 0; e < s.head_dim; ++e) { u[e] += layer.bq(0, qh * s.head_dim + e); }
            }
            const double nu = norm2(u);
            for (std::size_t e = 0; e < s.head_dim; ++e) {
                layer.sink(0, kh * s.head_dim + e) =
                    nu > 0.0 ? config.sink_strength * config.weight_scale * std::sqrt(static_cast<double>(s.head_dim)) * u[e] / nu
                             : 0.0;
            }
        }
        m.layers.push_back(std::move(layer));
    }
    m.head = detail::gaussian(rng, hd, config.vocab, 2.0 / std::sqrt(static_cast<double>(hd)));
    m.is_sink.assign(config.vocab, false);
    const auto n_sink = static_cast<std::size_t>(std::round(config.sink_fraction * static_cast<double>(config.vocab)));
    for (std::size_t t : rng.sample_without_replacement(config.vocab, n_sink)) { m.is_sink[t] = true; }
    return m;
}

/// Per-layer tensors recorded by a monolithic forward.
struct ForwardLayerTrace {
    std::vector<Matrix> queries;   // [q_head] T × d, RoPE applied
    std::vector<Matrix> keys;      // [kv_head] T × d, RoPE applied
    std::vector<Matrix> values;    // [kv_head] T × d
    std::vector<Matrix> attention; // [q_head] T × d attention outputs
    Matrix hidden;                 // T × hidden, after the block's residual
};

struct ForwardTrace {
    Matrix logits; // T × vocab
    std::vector<ForwardLayerTrace> layers;
};

/// Causal forward over a whole sequence at positions 0..T−1.
[[nodiscard]] inline ForwardTrace forward_full(const ToyModel& model, std::span<const std::int32_t> tokens)
{
    const auto& c = model.config;
    const auto& s = c.shape;
    const std::size_t t_len = tokens.size();
    if (t_len == 0) { throw std::invalid_argument("forward: empty input"); }
    const std::size_t d = s.head_dim;
    const std::size_t g = s.group_size();
    Matrix x(t_len, c.hidden);
    for (std::size_t t = 0; t < t_len; ++t) {
        if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= c.vocab) {
            throw std::out_of_range("token out of vocab");
        }
        auto e = model.embed.row(static_cast<std::size_t>(tokens[t]));
        std::copy(e.begin(), e.end(), x.row(t).begin());
    }
    ForwardTrace trace;
    const double scale = attention_scale(d);
    for (const auto& layer : model.layers) {
        ForwardLayerTrace lt;
        Matrix h = x;
        for (std::size_t t = 0; t < t_len; ++t) { detail::rms_normalize(h.row(t)); }
        Matrix q = matmul(h, layer.wq);
        Matrix k = matmul(h, layer.wk);
        Matrix v = matmul(h, layer.wv);
        for (std::size_t t = 0; t < t_len; ++t) {
            for (std::size_t j = 0; j < q.cols(); ++j) { q(t, j) += layer.bq(0, j); }
            const double sk = model.sink(tokens[t]) ? 1.0 : 0.0;
            for (std::size_t j = 0; j < k.cols(); ++j) { k(t, j) += layer.bk(0, j) + sk * layer.sink(0, j); }
        }
        for (std::size_t qh = 0; qh < s.num_q_heads; ++qh) {
            Matrix qm(t_len, d);
            for (std::size_t t = 0; t < t_len; ++t) {
                auto src = q.row(t).subspan(qh * d, d);
                std::copy(src.begin(), src.end(), qm.row(t).begin());
                rope_apply_in_place(qm.row(t), static_cast<std::int64_t>(t), c.rope);
            }
            lt.queries.push_back(std::move(qm));
        }
        for (std::size_t kh = 0; kh < s.num_kv_heads; ++kh) {
            Matrix km(t_len, d);
            Matrix vm(t_len, d);
            for (std::size_t t = 0; t < t_len; ++t) {
                auto ks = k.row(t).subspan(kh * d, d);
                auto vs = v.row(t).subspan(kh * d, d);
                std::copy(ks.begin(), ks.end(), km.row(t).begin());
                std::copy(vs.begin(), vs.end(), vm.row(t).begin());
                rope_apply_in_place(km.row(t), static_cast<std::int64_t>(t), c.rope);
            }
            lt.keys.push_back(std::move(km));
            lt.values.push_back(std::move(vm));
        }
        Matrix concat(t_len, s.num_q_heads * d);
        for (std::size_t qh = 0; qh < s.num_q_heads; ++qh) {
            const std::size_t kh = qh / g;
            Matrix scores = matmul_nt(lt.queries[qh], lt.keys[kh]);
            Matrix att(t_len, d);
            for (std::size_t t = 0; t < t_len; ++t) {
                auto row = scores.row(t);
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= t; ++j) {
                    row[j] *= scale;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= t; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                auto out = att.row(t);
                for (std::size_t j = 0; j <= t; ++j) {
                    auto vr = lt.values[kh].row(j);
                    for (std::size_t e = 0; e < d; ++e) { out[e] += row[j] / z * vr[e]; }
                }
                std::copy(out.begin(), out.end(), concat.row(t).begin() + static_cast<std::ptrdiff_t>(qh * d));
            }
            lt.attention.push_back(std::move(att));
        }
        Matrix proj = matmul(concat, layer.wo);
        for (std::size_t i = 0; i < x.size(); ++i) { x.flat()[i] += proj.flat()[i]; }
        Matrix h2 = x;
        for (std::size_t t = 0; t < t_len; ++t) { detail::rms_normalize(h2.row(t)); }
        Matrix u = matmul(h2, layer.w1);
        for (double& val : u.flat()) { val = detail::silu(val); }
        Matrix f = matmul(u, layer.w2);
        for (std::size_t i = 0; i < x.size(); ++i) { x.flat()[i] += f.flat()[i]; }
        lt.hidden = x;
        trace.layers.push_back(std::move(lt));
    }
    Matrix hn = x;
    for (std::size_t t = 0; t < t_len; ++t) { detail::rms_normalize(hn.row(t)); }
    trace.logits = matmul(hn, model.head);
    return trace;
}

/// Incremental decoder over a growable per-(layer, kv head) cache.
class ToyDecoder {
  public:
    ToyDecoder(const ToyModel& model, const KvStack& cache) : model_{&model}
    {
        const auto& s = model.config.shape;
        if (cache.size() != s.num_layers) { throw std::invalid_argument("decoder: cache layer count mismatch"); }
        keys_.resize(s.num_layers);
        values_.resize(s.num_layers);
        rows_.assign(s.num_layers, std::vector<std::size_t>(s.num_kv_heads, 0));
        for (std::size_t l = 0; l < s.num_layers; ++l) {
            if (cache[l].size() != s.num_kv_heads) { throw std::invalid_argument("decoder: cache head count mismatch"); }
            for (std::size_t h = 0; h < s.num_kv_heads; ++h) {
                const auto& kv = cache[l][h];
                if (kv.keys.cols() != s.head_dim || kv.values.cols() != s.head_dim || kv.keys.rows() != kv.values.rows()) {
                    throw std::invalid_argument("decoder: cache head shape mismatch");
                }
                keys_[l].push_back(kv.keys.storage());
                values_[l].push_back(kv.values.storage());
                rows_[l][h] = kv.keys.rows();
            }
        }
    }

    struct Step {
        std::vector<double> logits;
        std::vector<std::vector<double>> hidden;  // [layer] post-block residual stream
        std::vector<std::vector<double>> queries; // [layer] h_q·d, RoPE applied
    };

    /// Feeds `token` at `position`, appends its KV, returns next-token logits.
    Step step(std::int32_t token, std::int64_t position)
    {
        const auto& c = model_->config;
        const auto& s = c.shape;
        if (token < 0 || static_cast<std::size_t>(token) >= c.vocab) { throw std::out_of_range("token out of vocab"); }
        const std::size_t d = s.head_dim;
        const std::size_t g = s.group_size();
        const double scale = attention_scale(d);
        Step out;
        auto e = model_->embed.row(static_cast<std::size_t>(token));
        std::vector<double> x(e.begin(), e.end());
        std::vector<double> h(c.hidden), q(s.num_q_heads * d), k(s.num_kv_heads * d), v(s.num_kv_heads * d);
        std::vector<double> concat(s.num_q_heads * d), proj(c.hidden), u(c.ffn), scores;
        for (std::size_t l = 0; l < s.num_layers; ++l) {
            const auto& layer = model_->layers[l];
            h = x;
            detail::rms_normalize(h);
            detail::row_matmul(h, layer.wq, q);
            detail::row_matmul(h, layer.wk, k);
            detail::row_matmul(h, layer.wv, v);
            for (std::size_t j = 0; j < q.size(); ++j) { q[j] += layer.bq(0, j); }
            const double sk = model_->sink(token) ? 1.0 : 0.0;
            for (std::size_t j = 0; j < k.size(); ++j) { k[j] += layer.bk(0, j) + sk * layer.sink(0, j); }
            for (std::size_t qh = 0; qh < s.num_q_heads; ++qh) {
                rope_apply_in_place(std::span<double>{q}.subspan(qh * d, d), position, c.rope);
            }
            for (std::size_t kh = 0; kh < s.num_kv_heads; ++kh) {
                auto ks = std::span<double>{k}.subspan(kh * d, d);
                rope_apply_in_place(ks, position, c.rope);
                keys_[l][kh].insert(keys_[l][kh].end(), ks.begin(), ks.end());
                auto vs = std::span<const double>{v}.subspan(kh * d, d);
                values_[l][kh].insert(values_[l][kh].end(), vs.begin(), vs.end());
                ++rows_[l][kh];
            }
            out.queries.push_back(q);
            for (std::size_t qh = 0; qh < s.num_q_heads; ++qh) {
                const std::size_t kh = qh / g;
                const std::size_t n = rows_[l][kh];
                const double* kd = keys_[l][kh].data();
                const double* vd = values_[l][kh].data();
                const double* qd = q.data() + qh * d;
                scores.assign(n, 0.0);
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    double sdot = 0.0;
                    for (std::size_t e2 = 0; e2 < d; ++e2) { sdot += qd[e2] * kd[j * d + e2]; }
                    scores[j] = sdot * scale;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (double& sc : scores) {
                    sc = std::exp(sc - mx);
                    z += sc;
                }
                double* o = concat.data() + qh * d;
                std::fill(o, o + d, 0.0);
                for (std::size_t j = 0; j < n; ++j) {
                    const double w = scores[j] / z;
                    for (std::size_t e2 = 0; e2 < d; ++e2) { o[e2] += w * vd[j * d + e2]; }
                }
            }
            detail::row_matmul(concat, layer.wo, proj);
            for (std::size_t i = 0; i < x.size(); ++i) { x[i] += proj[i]; }
            h = x;
            detail::rms_normalize(h);
            detail::row_matmul(h, layer.w1, u);
            for (double& val : u) { val = detail::silu(val); }
            detail::row_matmul(u, layer.w2, proj);
            for (std::size_t i = 0; i < x.size(); ++i) { x[i] += proj[i]; }
            out.hidden.push_back(x);
        }
        detail::rms_normalize(x);
        out.logits.assign(c.vocab, 0.0);
        detail::row_matmul(x, model_->head, out.logits);
        return out;
    }

  private:
    const ToyModel* model_;
    std::vector<std::vector<std::vector<double>>> keys_;
    std::vector<std::vector<std::vector<double>>> values_;
    std::vector<std::vector<std::size_t>> rows_;
};

/// Sequence sampled from the model itself, starting from a random token.
[[nodiscard]] inline std::vector<std::int32_t> sample_tokens(const ToyModel& model, std::size_t length,
                                                             std::uint64_t seed, double temperature = 1.0)
{
    if (length == 0) { throw std::invalid_argument("sample: length must be at least 1"); }
    const auto& s = model.config.shape;
    Rng rng{derive_seed(seed, 0x73616d70ULL)};
    KvStack empty(s.num_layers, std::vector<LayerKv>(s.num_kv_heads, LayerKv{Matrix(0, s.head_dim), Matrix(0, s.head_dim)}));
    ToyDecoder dec(model, empty);
    const auto& c = model.config;
    // topic j owns the vocabulary slice perm[i] with i % topic_count == j
    std::vector<std::size_t> topic_of(c.vocab);
    if (c.topic_period > 0) {
        Rng trng{derive_seed(c.seed, 0x746f706963ULL)};
        auto perm = trng.sample_without_replacement(c.vocab, c.vocab);
        for (std::size_t i = 0; i < perm.size(); ++i) { topic_of[perm[i]] = i % c.topic_count; }
    }
    std::vector<std::int32_t> tokens{static_cast<std::int32_t>(rng.below(model.config.vocab))};
    while (tokens.size() < length) {
        auto st = dec.step(tokens.back(), static_cast<std::int64_t>(tokens.size() - 1));
        if (c.topic_period > 0) {
            const std::size_t segment = tokens.size() / c.topic_period;
            const std::size_t topic = Rng{derive_seed(seed, 0x746f706963ULL, segment)}.below(c.topic_count);
            for (std::size_t v = 0; v < st.logits.size(); ++v) {
                if (topic_of[v] == topic) { st.logits[v] += c.topic_strength; }
            }
        }
        std::vector<double> p(st.logits.size());
        double mx = -std::numeric_limits<double>::infinity();
        for (double l : st.logits) { mx = std::max(mx, l / temperature); }
        double z = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = std::exp(st.logits[i] / temperature - mx);
            z += p[i];
        }
        double u = rng.uniform() * z;
        std::size_t pick = p.size() - 1;
        for (std::size_t i = 0; i < p.size(); ++i) {
            u -= p[i];
            if (u < 0.0) {
                pick = i;
                break;
            }
        }
        tokens.push_back(static_cast<std::int32_t>(pick));
    }
    return tokens;
}

/// Full cache of a context plus its stored queries. Reference logits and
/// continuation tokens are attached when `continuation` is non-empty.
[[nodiscard]] inline ModelKvCache prefill(const ToyModel& model, std::span<const std::int32_t> context,
                                          std::span<const std::int32_t> continuation = {})
{
    if (context.size() < 2) { throw std::invalid_argument("prefill: context must have at least two tokens"); }
    const auto& c = model.config;
    auto tr = forward_full(model, context);
    ModelKvCache cache;
    cache.shape = c.shape;
    cache.rope = c.rope;
    cache.context_len = context.size();
    for (std::size_t i = 0; i < context.size(); ++i) { cache.positions.push_back(static_cast<std::int64_t>(i)); }
    for (auto& lt : tr.layers) {
        std::vector<HeadCache> heads;
        for (std::size_t kh = 0; kh < c.shape.num_kv_heads; ++kh) {
            heads.push_back({std::move(lt.keys[kh]), std::move(lt.values[kh]), cache.positions});
        }
        cache.heads.push_back(std::move(heads));
        cache.queries.push_back(std::move(lt.queries));
    }
    cache.extra = nlohmann::json{{"toy_model", to_json(c)}, {"context_tokens", std::vector<std::int32_t>(context.begin(), context.end())}};
    if (!continuation.empty()) {
        ToyDecoder dec(model, kv_stack(cache));
        Matrix logits(continuation.size(), c.vocab);
        for (std::size_t t = 0; t < continuation.size(); ++t) {
            auto st = dec.step(continuation[t], static_cast<std::int64_t>(context.size() + t));
            std::copy(st.logits.begin(), st.logits.end(), logits.row(t).begin());
        }
        cache.ref_logits = std::move(logits);
        cache.ref_tokens.assign(continuation.begin(), continuation.end());
    }
    return cache;
}

struct DecodeResult {
    Matrix logits;                          // T × vocab
    std::vector<Matrix> hidden;             // [layer] T × hidden
    std::vector<std::vector<Matrix>> queries; // [layer][q_head] T × d
};

/// Teacher-forced decode of `tokens` at positions start, start+1, … over a
/// (full or compressed) cache.
[[nodiscard]] inline DecodeResult decode_teacher_forced(const ToyModel& model, const KvStack& cache,
                                                        std::span<const std::int32_t> tokens, std::int64_t start)
{
    if (tokens.empty()) { throw std::invalid_argument("decode: need at least one token"); }
    const auto& c = model.config;
    const auto& s = c.shape;
    const std::size_t t_len = tokens.size();
    ToyDecoder dec(model, cache);
    DecodeResult r;
    r.logits = Matrix(t_len, c.vocab);
    r.hidden.assign(s.num_layers, Matrix(t_len, c.hidden));
    r.queries.assign(s.num_layers, std::vector<Matrix>(s.num_q_heads, Matrix(t_len, s.head_dim)));
    for (std::size_t t = 0; t < t_len; ++t) {
        auto st = dec.step(tokens[t], start + static_cast<std::int64_t>(t));
        std::copy(st.logits.begin(), st.logits.end(), r.logits.row(t).begin());
        for (std::size_t l = 0; l < s.num_layers; ++l) {
            std::copy(st.hidden[l].begin(), st.hidden[l].end(), r.hidden[l].row(t).begin());
            for (std::size_t qh = 0; qh < s.num_q_heads; ++qh) {
                auto src = std::span<const double>{st.queries[l]}.subspan(qh * s.head_dim, s.head_dim);
                std::copy(src.begin(), src.end(), r.queries[l][qh].row(t).begin());
            }
        }
    }
    return r;
}

/// Builds a toy model and a cache over its own sampled text.
[[nodiscard]] inline ModelKvCache generate_toy_cache(const ToyModelConfig& config, std::size_t context_len,
                                                     std::size_t continuation_len)
{
    auto model = build_toy_model(config);
    auto tokens = sample_tokens(model, context_len + continuation_len, config.seed);
    std::span<const std::int32_t> all{tokens};
    return prefill(model, all.first(context_len), all.subspan(context_len));
}

} // namespace kvsculpt
