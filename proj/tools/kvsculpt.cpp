// kvsculpt command line: gen, compress, allocate, eval.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kvsculpt/allocator.hpp"
#include "kvsculpt/evalharness.hpp"
#include "kvsculpt/kvd.hpp"
#include "kvsculpt/pipeline.hpp"
#include "kvsculpt/toymodel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kvsculpt;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) { fs::create_directories(path.parent_path()); }
    std::ofstream f(path, std::ios::trunc);
    if (!f) { throw std::runtime_error("cannot open " + path.string() + " for writing"); }
    f << text;
    if (!f) { throw std::runtime_error("write failed: " + path.string()); }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path)
{
    std::ifstream f(path);
    if (!f) { throw std::runtime_error("cannot read " + path.string()); }
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

fs::path sibling(const fs::path& p, const std::string& suffix)
{
    fs::path out = p;
    out.replace_extension();
    out += suffix;
    return out;
}

// --config: flat keys are long flag names for whichever command runs (ignored
// when that command lacks the flag); keys under an object named after the
// command must all exist. Config values are spliced in ahead of the real
// arguments and single-valued options keep their last value, so flags win.
std::vector<std::string> config_tokens(const json& cfg, const CLI::App& cmd)
{
    std::vector<std::string> out;
    auto emit = [&](const std::string& key, const json& v, bool strict) {
        const std::string flag = "--" + key;
        const CLI::Option* opt = cmd.get_option_no_throw(flag);
        if (opt == nullptr) {
            if (strict) { throw UsageError("config: " + cmd.get_name() + " has no option " + flag); }
            return;
        }
        if (v.is_boolean()) {
            if (v.get<bool>()) { out.push_back(flag); }
            return;
        }
        out.push_back(flag);
        if (v.is_array()) {
            std::string joined;
            for (const auto& e : v) { joined += (joined.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump()); }
            out.push_back(joined);
        } else {
            out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        }
    };
    if (!cfg.is_object()) { throw UsageError("config: top level must be a JSON object"); }
    for (const auto& [key, v] : cfg.items()) {
        if (v.is_object()) { continue; }
        emit(key, v, false);
    }
    if (cfg.contains(cmd.get_name()) && cfg[cmd.get_name()].is_object()) {
        for (const auto& [key, v] : cfg[cmd.get_name()].items()) { emit(key, v, true); }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shared compression flags

struct CompressFlags {
    std::string method = "kvsculpt";
    std::size_t retain = 32;
    std::string alloc = "uniform";
    double alpha = 0.5;
    std::size_t pilot_steps = 0;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    std::string strategy = "uniform";
    DistillConfig distill{};

    void add(CLI::App* app)
    {
        app->add_option("--method", method, "random | attn | selectfit | kvsculpt")
            ->check(CLI::IsMember({"random", "attn", "selectfit", "kvsculpt"}));
        app->add_option("--retain", retain, "retain-zone size m")->check(CLI::PositiveNumber);
        app->add_option("--alloc", alloc, "budget policy: uniform | layer | head")
            ->check(CLI::IsMember({"uniform", "layer", "head"}));
        app->add_option("--alpha", alpha, "allocation exponent")->check(CLI::NonNegativeNumber);
        app->add_option("--pilot-steps", pilot_steps, "pilot outer steps (default 60 layer, 30 head)");
        app->add_option("--seed", seed, "run seed");
        app->add_option("--threads", threads, "worker threads (0: KVSCULPT_THREADS or all cores)");
        app->add_option("--strategy", strategy, "synthetic query strategy")
            ->check(CLI::IsMember({"uniform", "bootstrap", "random", "kmeans", "farthest"}));
        app->add_option("--outer-steps", distill.outer_steps, "outer K/V steps")->check(CLI::PositiveNumber);
        app->add_option("--v-every", distill.v_solve_every, "V-solve period")->check(CLI::PositiveNumber);
        app->add_option("--inner-iters", distill.lbfgs_inner_iters, "L-BFGS iterations per step")->check(CLI::PositiveNumber);
        app->add_option("--lbfgs-lr", distill.lbfgs_lr, "initial line-search step")->check(CLI::PositiveNumber);
        app->add_option("--lambda-lse", distill.lambda_lse, "LSE term weight")->check(CLI::PositiveNumber);
        app->add_option("--lambda-ridge", distill.lambda_ridge, "V-solve ridge")->check(CLI::PositiveNumber);
        app->add_option("--n-synth", distill.n_synth, "synthetic future queries")->check(CLI::PositiveNumber);
    }

    [[nodiscard]] CompressOptions options() const
    {
        CompressOptions o;
        o.method = parse_method(method);
        o.retain = retain;
        o.strategy = parse_query_strategy(strategy);
        o.distill = distill;
        o.distill.seed = seed;
        o.threads = threads;
        return o;
    }

    [[nodiscard]] AllocPolicy policy() const { return parse_alloc_policy(alloc); }

    [[nodiscard]] std::size_t pilot() const { return pilot_steps > 0 ? pilot_steps : default_pilot_steps(policy()); }
};

struct CompressRun {
    CompressedModel model;
    BudgetPlan plan;
    std::optional<PilotReport> pilot;
    json report;
};

CompressRun run_compress(const ModelKvCache& cache, double ratio, const CompressFlags& f)
{
    const auto opt = f.options();
    const std::size_t n = cache.context_len;
    if (f.retain >= n) { throw std::invalid_argument("retain zone must be smaller than the context"); }
    const std::size_t k = uniform_budget(ratio, f.retain, n);
    if (k > n - f.retain) { throw std::invalid_argument("budget exceeds zone"); }
    const std::size_t cells = cache.shape.num_layers * cache.shape.num_kv_heads;

    CompressRun run;
    if (f.policy() == AllocPolicy::uniform) {
        run.plan.k = uniform_grid(cache.shape, k);
        run.plan.total = k * cells;
        run.plan.alpha = 0.0;
        run.plan.k_min_floor = 4;
        run.plan.policy = AllocPolicy::uniform;
    } else {
        run.pilot = run_pilot(cache, k, f.pilot(), opt);
        run.plan = make_plan(*run.pilot, k * cells, f.alpha, f.policy());
    }
    run.model = compress_model(cache, run.plan.k, opt);

    json heads = json::array();
    double loss_sum = 0.0;
    for (std::size_t l = 0; l < run.model.heads.size(); ++l) {
        for (std::size_t h = 0; h < run.model.heads[l].size(); ++h) {
            const auto& o = run.model.heads[l][h];
            loss_sum += o.loss.total;
            heads.push_back({{"layer", l},
                             {"kv_head", h},
                             {"k", o.k},
                             {"loss", o.loss.total},
                             {"output_mse", o.loss.output_mse},
                             {"lse_term", o.loss.lse_term},
                             {"grad_evals", o.trace.total_grad_evals},
                             {"v_solves", o.trace.v_solves},
                             {"stalled_steps", o.trace.stalled_steps}});
        }
    }
    run.report = {{"command", "compress"},
                  {"method", f.method},
                  {"ratio", ratio},
                  {"retain", f.retain},
                  {"context_len", n},
                  {"seed", f.seed},
                  {"alloc", f.alloc},
                  {"strategy", f.strategy},
                  {"uniform_k", k},
                  {"total_budget", run.model.cache.total_budget()},
                  {"plan", to_json(run.plan)},
                  {"mean_loss", loss_sum / static_cast<double>(cells)},
                  {"heads", heads}};
    if (run.pilot) { run.report["pilot"] = to_json(*run.pilot); }
    return run;
}

void write_traces(const fs::path& path, const CompressedModel& m)
{
    std::string text;
    for (std::size_t l = 0; l < m.heads.size(); ++l) {
        for (std::size_t h = 0; h < m.heads[l].size(); ++h) {
            for (const auto& r : trace_records(m.heads[l][h].trace, l, h)) { text += r.dump() + "\n"; }
        }
    }
    write_text(path, text);
}

ToyModel model_for(const ModelKvCache& cache)
{
    if (!cache.extra.contains("toy_model")) {
        throw std::runtime_error("eval: cache has no toy_model metadata; teacher-forced decoding needs the generating model");
    }
    return build_toy_model(toy_config_from_json(cache.extra.at("toy_model")));
}

void check_compatible(const ModelKvCache& full, const CompressedKvCache& comp)
{
    if (!(full.shape == comp.shape) || !(full.rope == comp.rope) || full.context_len != comp.context_len
        || full.positions != comp.positions) {
        throw std::runtime_error("eval: compressed cache does not match the full cache (shape, rope or context)");
    }
}

// ---------------------------------------------------------------------------
// Commands

struct GenFlags {
    ToyModelConfig toy{};
    std::size_t ctx = 256;
    std::size_t cont = 32;
    std::string dtype = "f32";
    std::string out;
};

void cmd_gen(const GenFlags& g)
{
    ToyModelConfig c = g.toy;
    c.hidden = c.shape.num_q_heads * c.shape.head_dim;
    c.rope.head_dim = c.shape.head_dim;
    c.validate();
    auto cache = generate_toy_cache(c, g.ctx, g.cont);
    write_kvd(g.out, cache, parse_dtype(g.dtype));
}

struct AllocateFlags {
    std::string pilot;
    std::string cache;
    double ratio = 0.3;
    std::size_t budget = 0;
    double alpha = 0.5;
    std::string policy = "layer";
    std::size_t floor = 4;
    std::string out;
    std::string pilot_out;
    CompressFlags run{};
};

void cmd_allocate(const AllocateFlags& a)
{
    PilotReport pilot;
    if (!a.pilot.empty() && !a.cache.empty()) { throw UsageError("allocate: give either --pilot or --cache, not both"); }
    if (!a.pilot.empty()) {
        pilot = pilot_from_json(read_json(a.pilot));
    } else if (!a.cache.empty()) {
        auto cache = read_model_cache(a.cache);
        const std::size_t k = uniform_budget(a.ratio, a.run.retain, cache.context_len);
        CompressFlags f = a.run;
        f.alloc = a.policy;
        pilot = run_pilot(cache, k, f.pilot(), f.options());
        if (!a.pilot_out.empty()) { write_json(a.pilot_out, to_json(pilot)); }
    } else {
        throw UsageError("allocate: --pilot or --cache is required");
    }
    const std::size_t total = a.budget > 0 ? a.budget : pilot.uniform_k * pilot.num_layers() * pilot.num_heads();
    auto plan = make_plan(pilot, total, a.alpha, parse_alloc_policy(a.policy), a.floor);
    json j = to_json(plan);
    if (a.out.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        write_json(a.out, j);
    }
}

struct EvalFlags {
    std::string cache;
    std::string compressed;
    std::string out;
    std::string out_dir;
    std::vector<double> ratios;
    bool plot_data = false;
    EvalOptions eval{};
    std::string eval_strategy = "uniform";
    CompressFlags run{};
};

json eval_json(const EvalReport& rep, const ModelKvCache& full, const EvalFlags& e)
{
    json j = to_json(rep);
    j["command"] = "eval";
    j["context_len"] = full.context_len;
    j["continuation_len"] = full.ref_tokens.size();
    j["strategy"] = e.eval_strategy;
    return j;
}

void write_eval(const fs::path& path, const json& j, const EvalReport& rep, bool plot)
{
    write_json(path, j);
    if (plot) { write_text(sibling(path, ".csv"), plot_csv(rep)); }
}

void cmd_eval(EvalFlags e)
{
    auto full = read_model_cache(e.cache);
    auto model = model_for(full);
    e.eval.strategy = parse_query_strategy(e.eval_strategy);
    e.eval.seed = e.run.seed;
    if (e.ratios.empty()) {
        if (e.compressed.empty() || e.out.empty()) { throw UsageError("eval: --compressed and --out are required without --ratios"); }
        auto comp = read_compressed_cache(e.compressed);
        check_compatible(full, comp);
        auto rep = evaluate(model, full, kv_stack(comp), e.eval);
        json j = eval_json(rep, full, e);
        j["compressed"] = e.compressed;
        j["total_budget"] = comp.total_budget();
        write_eval(e.out, j, rep, e.plot_data);
        return;
    }
    if (e.out_dir.empty()) { throw UsageError("eval: --out-dir is required with --ratios"); }
    for (double r : e.ratios) {
        auto run = run_compress(full, r, e.run);
        auto rep = evaluate(model, full, kv_stack(run.model.cache), e.eval);
        json j = eval_json(rep, full, e);
        j["ratio"] = r;
        j["method"] = e.run.method;
        j["alloc"] = e.run.alloc;
        j["total_budget"] = run.model.cache.total_budget();
        char name[64];
        std::snprintf(name, sizeof name, "eval_r%.2f.json", r);
        write_eval(fs::path(e.out_dir) / name, j, rep, e.plot_data);
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"KV-cache distillation engine"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config; flags override it")->check(CLI::ExistingFile);

    GenFlags gen;
    auto* g = app.add_subcommand("gen", "generate a toy-model cache");
    g->add_option("--seed", gen.toy.seed, "model and text seed");
    g->add_option("--layers", gen.toy.shape.num_layers, "layers")->check(CLI::PositiveNumber);
    g->add_option("--qheads", gen.toy.shape.num_q_heads, "query heads")->check(CLI::PositiveNumber);
    g->add_option("--kvheads", gen.toy.shape.num_kv_heads, "KV heads")->check(CLI::PositiveNumber);
    g->add_option("--dim", gen.toy.shape.head_dim, "head dimension")->check(CLI::PositiveNumber);
    g->add_option("--vocab", gen.toy.vocab, "vocabulary size");
    g->add_option("--ffn", gen.toy.ffn, "feed-forward width");
    g->add_option("--ctx", gen.ctx, "context length N")->check(CLI::Range(2, 1 << 20));
    g->add_option("--cont", gen.cont, "continuation length T");
    g->add_option("--topic-period", gen.toy.topic_period, "topic drift period in tokens (0: off)");
    g->add_option("--dtype", gen.dtype, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
    g->add_option("--out", gen.out, "output .kvd")->required();

    CompressFlags comp;
    std::string comp_cache;
    std::string comp_out;
    std::string comp_report;
    std::string comp_trace;
    std::string comp_dtype = "f32";
    double comp_ratio = 0.3;
    auto* c = app.add_subcommand("compress", "compress a cache");
    c->add_option("--cache", comp_cache, "input .kvd")->required();
    c->add_option("--out", comp_out, "output .kvd")->required();
    c->add_option("--ratio", comp_ratio, "compression ratio r = (k + m) / N");
    c->add_option("--report", comp_report, "report JSON (default: <out>.report.json)");
    c->add_option("--trace", comp_trace, "per-step trace JSONL (default: <out>.trace.jsonl)");
    c->add_option("--dtype", comp_dtype, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
    comp.add(c);

    AllocateFlags alloc;
    auto* a = app.add_subcommand("allocate", "turn a pilot report into a budget plan");
    a->add_option("--pilot", alloc.pilot, "pilot report JSON");
    a->add_option("--cache", alloc.cache, "run the pilot on this .kvd instead");
    a->add_option("--ratio", alloc.ratio, "uniform ratio of the pilot run");
    a->add_option("--budget", alloc.budget, "total budget B (default: pilot uniform k × cells)");
    a->add_option("--alpha", alloc.alpha, "allocation exponent")->check(CLI::NonNegativeNumber);
    a->add_option("--policy", alloc.policy, "uniform | layer | head")->check(CLI::IsMember({"uniform", "layer", "head"}));
    a->add_option("--floor", alloc.floor, "per-head minimum k")->check(CLI::PositiveNumber);
    a->add_option("--out", alloc.out, "plan JSON (default: stdout)");
    a->add_option("--pilot-out", alloc.pilot_out, "save the computed pilot report");
    a->add_option("--retain", alloc.run.retain, "retain-zone size m")->check(CLI::PositiveNumber);
    a->add_option("--pilot-steps", alloc.run.pilot_steps, "pilot outer steps");
    a->add_option("--seed", alloc.run.seed, "run seed");
    a->add_option("--threads", alloc.run.threads, "worker threads");

    EvalFlags ev;
    auto* e = app.add_subcommand("eval", "teacher-forced KL of a compressed cache, or a ratio sweep");
    e->add_option("--cache", ev.cache, "full .kvd with toy_model metadata")->required();
    e->add_option("--compressed", ev.compressed, "compressed .kvd");
    e->add_option("--out", ev.out, "report JSON");
    e->add_option("--ratios", ev.ratios, "sweep: compress at each ratio")->delimiter(',');
    e->add_option("--out-dir", ev.out_dir, "sweep output directory");
    e->add_flag("--plot-data", ev.plot_data, "also write CSV series next to each report");
    e->add_option("--horizon-window", ev.eval.horizon_window, "attention-cosine window")->check(CLI::PositiveNumber);
    e->add_option("--far-horizon", ev.eval.far_horizon, "far window end")->check(CLI::PositiveNumber);
    e->add_option("--eval-strategy", ev.eval_strategy, "proxy strategy for attention cosine")
        ->check(CLI::IsMember({"uniform", "bootstrap", "random", "kmeans", "farthest"}));
    e->add_option("--eval-n-synth", ev.eval.n_synth, "proxies for attention cosine")->check(CLI::PositiveNumber);
    ev.run.add(e);

    try {
        // First pass only locates --config and the command.
        std::vector<std::string> args(argv + 1, argv + argc);
        std::vector<std::string> tokens = args;
        auto pos = std::find(args.begin(), args.end(), "--config");
        if (pos != args.end() && pos + 1 != args.end()) {
            const json cfg = read_json(*(pos + 1));
            for (std::size_t i = 0; i < args.size(); ++i) {
                CLI::App* sub = app.get_subcommand_no_throw(args[i]);
                if (sub == nullptr) { continue; }
                auto extra = config_tokens(cfg, *sub);
                tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(i) + 1, extra.begin(), extra.end());
                break;
            }
        }
        std::reverse(tokens.begin(), tokens.end());
        app.parse(tokens);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }

    try {
        if (*g) {
            cmd_gen(gen);
        } else if (*c) {
            auto cache = read_model_cache(comp_cache);
            auto run = run_compress(cache, comp_ratio, comp);
            write_kvd(comp_out, run.model.cache, parse_dtype(comp_dtype));
            write_json(comp_report.empty() ? sibling(comp_out, ".report.json") : fs::path(comp_report), run.report);
            write_traces(comp_trace.empty() ? sibling(comp_out, ".trace.jsonl") : fs::path(comp_trace), run.model);
        } else if (*a) {
            cmd_allocate(alloc);
        } else if (*e) {
            cmd_eval(ev);
        }
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
