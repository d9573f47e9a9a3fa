#!/usr/bin/env python3
"""Black-box checks of the kvsculpt CLI: exit codes, schemas, determinism.

usage: cli_contract.py <kvsculpt binary> <schemas dir>
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema
from referencing import Registry, Resource

BIN = str(Path(sys.argv[1]).resolve())
SCHEMAS = Path(sys.argv[2]).resolve()
failures = []


def check(name, ok, detail=""):
    print(f"{'ok  ' if ok else 'FAIL'} {name}{(' : ' + detail) if detail else ''}", flush=True)
    if not ok:
        failures.append(name)


def run(*args, cwd):
    return subprocess.run([BIN, *map(str, args)], cwd=cwd, capture_output=True, text=True)


def load(path):
    return json.loads(Path(path).read_text())


def make_validator(name):
    registry = Registry()
    for f in SCHEMAS.glob("*.schema.json"):
        registry = registry.with_resource(f.name, Resource.from_contents(load(f)))
    return jsonschema.Draft202012Validator(load(SCHEMAS / f"{name}.schema.json"), registry=registry)


VALIDATORS = {n: make_validator(n) for n in ("pilot_report", "budget_plan", "compress_report", "eval_report")}


def valid(kind, doc):
    errors = [e.message for e in VALIDATORS[kind].iter_errors(doc)]
    return not errors, "; ".join(errors[:3])


def spread(plan):
    return plan["k_max"] - plan["k_min"]


def main():
    with tempfile.TemporaryDirectory(prefix="kvsculpt_cli_") as d:
        contract(Path(d))
    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


def contract(tmp):
    gen = ["gen", "--seed", 7, "--layers", 4, "--qheads", 4, "--kvheads", 2, "--dim", 16, "--ctx", 256]

    # gen
    r = run(*gen, "--out", "toy.kvd", cwd=tmp)
    check("gen exits 0", r.returncode == 0, r.stderr)
    run(*gen, "--out", "toy2.kvd", cwd=tmp)
    check("gen is deterministic", (tmp / "toy.kvd").read_bytes() == (tmp / "toy2.kvd").read_bytes())
    other = [a if a != 7 else 8 for a in gen]
    run(*other, "--out", "toy8.kvd", cwd=tmp)
    check("gen seed changes payload", (tmp / "toy.kvd").read_bytes() != (tmp / "toy8.kvd").read_bytes())
    check("gen without --out exits 2", run(*gen, cwd=tmp).returncode == 2)
    check("bad enum value exits 2", run(*gen, "--dtype", "f16", "--out", "x.kvd", cwd=tmp).returncode == 2)
    check("unknown command exits 2", run("frobnicate", cwd=tmp).returncode == 2)
    check("--help exits 0", run("--help", cwd=tmp).returncode == 0)
    r = run("compress", "--cache", "missing.kvd", "--out", "x.kvd", cwd=tmp)
    check("unreadable input exits 1", r.returncode == 1, r.stderr.strip())

    # compress, uniform
    base = ["compress", "--cache", "toy.kvd", "--ratio", 0.3, "--retain", 32]
    r = run(*base, "--method", "kvsculpt", "--alloc", "uniform", "--out", "c.kvd", cwd=tmp)
    check("compress exits 0", r.returncode == 0, r.stderr)
    rep = load(tmp / "c.report.json")
    check("compress report matches schema", *valid("compress_report", rep))
    k = rep["uniform_k"]
    check("uniform budget matches ratio", abs((k + 32) / 256 - 0.3) <= 1 / 256 and rep["total_budget"] == 8 * k,
          f"k={k} total={rep['total_budget']}")
    check("plan is uniform", all(x == k for row in rep["plan"]["k"] for x in row))
    trace = [json.loads(line) for line in (tmp / "c.trace.jsonl").read_text().splitlines()]
    check("trace has one record per head step", len(trace) == 8 * 100
          and all({"layer", "head", "step", "loss", "grad_evals", "elapsed_ms"} <= t.keys() for t in trace))

    r = run(*base, "--threads", 1, "--out", "c1.kvd", cwd=tmp)
    check("compress is deterministic across thread counts",
          r.returncode == 0 and (tmp / "c.kvd").read_bytes() == (tmp / "c1.kvd").read_bytes()
          and load(tmp / "c1.report.json") == rep)

    r = run(*base, "--method", "selectfit", "--out", "s.kvd", cwd=tmp)
    sel = load(tmp / "s.report.json")
    worse = [(a["layer"], a["kv_head"]) for a, b in zip(rep["heads"], sel["heads"]) if a["loss"] > b["loss"]]
    check("kvsculpt loss <= selectfit loss on every head", r.returncode == 0 and not worse, f"worse on {worse}")

    r = run("compress", "--cache", "toy.kvd", "--ratio", 0.1, "--retain", 32, "--out", "x.kvd", cwd=tmp)
    check("infeasible ratio exits 1", r.returncode == 1 and "error" in r.stderr, r.stderr.strip())

    # compress, layer allocation
    r = run(*base, "--alloc", "layer", "--alpha", 0.5, "--pilot-steps", 60, "--out", "l.kvd", cwd=tmp)
    lrep = load(tmp / "l.report.json")
    check("layer compress exits 0", r.returncode == 0, r.stderr)
    check("layer report embeds the pilot", "pilot" in lrep and lrep["pilot"]["pilot_steps"] == 60)
    check("layer report matches schema", *valid("compress_report", lrep))
    check("layer plan conserves the budget", sum(map(sum, lrep["plan"]["k"])) == 8 * k == lrep["total_budget"])

    # allocate
    (tmp / "p.json").write_text(json.dumps(lrep["pilot"]))
    check("pilot matches schema", *valid("pilot_report", lrep["pilot"]))
    r = run("allocate", "--pilot", "p.json", "--budget", 400, "--alpha", 0, "--out", "a0.json", cwd=tmp)
    plan = load(tmp / "a0.json") if r.returncode == 0 else {}
    check("allocate alpha 0 gives a uniform plan",
          r.returncode == 0 and all(x == 50 for row in plan["k"] for x in row), r.stderr)
    check("plan matches schema", *valid("budget_plan", plan))
    spreads = []
    for a in (0, 0.5, 1.0):
        r = run("allocate", "--pilot", "p.json", "--budget", 400, "--alpha", a, "--policy", "layer", cwd=tmp)
        p = json.loads(r.stdout)
        check(f"allocate alpha {a} conserves the budget", sum(map(sum, p["k"])) == 400)
        spreads.append(spread(p))
    check("spread is non-decreasing in alpha", spreads == sorted(spreads), str(spreads))
    r = run("allocate", "--pilot", "p.json", "--budget", 10, cwd=tmp)
    check("floor violation exits 1 with a diagnostic", r.returncode == 1 and "budget too small" in r.stderr,
          r.stderr.strip())
    check("allocate without a pilot exits 2", run("allocate", "--budget", 400, cwd=tmp).returncode == 2)

    # eval
    r = run("eval", "--cache", "toy.kvd", "--compressed", "c.kvd", "--out", "ev.json", "--plot-data", cwd=tmp)
    ev = load(tmp / "ev.json") if r.returncode == 0 else {}
    check("eval exits 0", r.returncode == 0, r.stderr)
    check("eval report matches schema", *valid("eval_report", ev))
    check("eval writes plot data", (tmp / "ev.csv").read_text().startswith("series,index,value"))
    run("compress", "--cache", "toy.kvd", "--ratio", 1.0, "--retain", 32, "--out", "full.kvd", cwd=tmp)
    r = run("eval", "--cache", "toy.kvd", "--compressed", "full.kvd", "--out", "evfull.json", cwd=tmp)
    kl = load(tmp / "evfull.json")["kl_mean"] if r.returncode == 0 else None
    check("lossless cache has zero KL", kl is not None and kl <= 1e-10, f"kl_mean={kl}")
    run(*gen[:-1], 128, "--out", "short.kvd", cwd=tmp)
    r = run("eval", "--cache", "short.kvd", "--compressed", "c.kvd", "--out", "bad.json", cwd=tmp)
    check("shape mismatch exits 1", r.returncode == 1, r.stderr.strip())
    r = run("eval", "--cache", "toy.kvd", "--ratios", "0.3,0.5,0.7", "--out-dir", "sweep", cwd=tmp)
    reports = sorted((tmp / "sweep").glob("eval_r*.json"))
    check("sweep writes one report per ratio", r.returncode == 0 and len(reports) == 3, r.stderr)
    check("sweep reports match schema", all(valid("eval_report", load(f))[0] for f in reports))
    kls = [load(f)["kl_mean"] for f in reports]
    check("sweep KL falls with the ratio", kls == sorted(kls, reverse=True), str(kls))

    # config file precedence
    (tmp / "run.json").write_text(json.dumps({"retain": 32, "outer-steps": 5, "layers": 9,
                                              "compress": {"ratio": 0.5}}))
    r = run("--config", "run.json", "compress", "--cache", "toy.kvd", "--out", "cf.kvd", cwd=tmp)
    check("config file sets values", r.returncode == 0 and load(tmp / "cf.report.json")["ratio"] == 0.5, r.stderr)
    r = run("--config", "run.json", "compress", "--cache", "toy.kvd", "--out", "cf.kvd", "--ratio", 0.4, cwd=tmp)
    check("flags override the config file", r.returncode == 0 and load(tmp / "cf.report.json")["ratio"] == 0.4)
    (tmp / "bad.json").write_text(json.dumps({"compress": {"no-such-flag": 1}}))
    r = run("--config", "bad.json", "compress", "--cache", "toy.kvd", "--out", "cf.kvd", cwd=tmp)
    check("unknown key in a command section exits 2", r.returncode == 2, r.stderr.strip())


if __name__ == "__main__":
    sys.exit(main())
