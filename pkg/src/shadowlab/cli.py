"""Command-line experiment runner: configs in JSON, records in JSON, tables in CSV.

Every command builds a config dict, validates it against CONFIG_SCHEMA and
dispatches through run(). Randomness comes from numpy's PCG64 generator
seeded per trial with seed + trial index, so records are reproducible
across platforms. Timing lives in its own top-level field and is the only
part of a record that varies between identical runs.
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time

import jsonschema
import numpy as np

from . import __version__
from .hyperbolic_local import estimate_constants
from .models import MODELS, UnknownModel, make_model
from .pseudotraj import Pseudotrajectory, craft_chain, generate, validate
from .segmentation import classify, connection_digraph, has_cycle, topological_order
from .shadow_engine import (EmptyIntersection, Infeasible, NotClassified, CertificationFailure,
                            run_shadowing)
from .transversality import connection_query, t_condition

EXIT_OK, EXIT_UNVERIFIED, EXIT_CONFIG = 0, 2, 3

COMMANDS = ["models", "generate", "classify", "shadow", "transversality", "digraph", "constants", "report"]

_pos = {"type": "number", "exclusiveMinimum": 0}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["command"],
    "properties": {
        "command": {"enum": COMMANDS},
        "model": {"type": "string", "enum": sorted(MODELS)},
        "params": {"type": "object"},
        "d": {"type": "number", "minimum": 0},
        "eps": _pos,
        "steps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "trials": {"type": "integer", "minimum": 1},
        "L": _pos,
        "N": {"type": "integer", "minimum": 1},
        "s0": {"type": "integer", "minimum": 1},
        "chain": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "dwell": {"type": "integer", "minimum": 1},
        "input": {"type": "string"},
        "inputs": {"type": "array", "items": {"type": "string"}},
        "out": {"type": "string"},
        "format": {"enum": ["json", "csv"]},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


class VerificationFailure(RuntimeError):
    pass


def validate_config(config):
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(exc.message) from exc
    if config["command"] in ("generate", "shadow", "transversality", "digraph", "constants") and "model" not in config:
        raise ConfigError(f"{config['command']} needs a model")
    if config["command"] == "classify" and "input" not in config:
        raise ConfigError("classify needs --input")
    return config


def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def atomic_write(path, text):
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _threads():
    try:
        return max(1, int(os.environ.get("SHADOWLAB_THREADS", "1")))
    except ValueError:
        return 1


def _model(config):
    model_cfg = dict(config.get("params", {}))
    model_cfg["model"] = config["model"]
    try:
        return make_model(model_cfg)
    except (UnknownModel, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def default_chain(model):
    """One basic set per stable dimension, lowest first: source to sink."""
    seen, chain = set(), []
    for b in sorted(model.basic_sets, key=lambda b: (b.stable_dim, b.label)):
        if b.stable_dim not in seen:
            seen.add(b.stable_dim)
            chain.append(b.label)
    return chain


def default_eps(model, d):
    if len(model.basic_sets) == 1:
        return 10 * d / (1 - model.expansion_rates()[0])
    return 0.02


def _trajectory(model, config, seed):
    d = config.get("d", 1e-4)
    if len(model.basic_sets) == 1:
        x0 = np.random.default_rng(seed).random(model.dim)
        return generate(model, x0, 0, config.get("steps", 1000), d, seed)
    chain = config.get("chain") or default_chain(model)
    return craft_chain(model, chain, config.get("dwell", 20), d, seed)


def _shadow_trial(model, config, seed):
    xi = _trajectory(model, config, seed)
    d = xi.d
    eps = config.get("eps") or default_eps(model, d)
    out = {"seed": seed, "d": d, "eps": eps, "steps": len(xi) - 1}
    try:
        r = run_shadowing(model, xi, eps, L=config.get("L"))
    except (NotClassified, Infeasible, EmptyIntersection, CertificationFailure) as exc:
        out.update({"verified": False, "error": f"{type(exc).__name__}: {exc}"})
        return out
    out.update({"verified": r.verified, "max_deviation": r.max_deviation,
                "deviation_over_d": r.max_deviation / d if d else None,
                "z": [float(c) for c in r.z], "membership_ok": r.membership_ok,
                "alpha_max": max(e["alpha"] for e in r.ledger), "beta_max": max(e["beta"] for e in r.ledger),
                "segmentation": r.segmentation.to_json(), "ledger": r.ledger, "error": None})
    return out


def _cmd_models(config):
    out = []
    for name, cls in sorted(MODELS.items()):
        m = cls()
        out.append({"model": name, "dim": m.dim, "params": m.params(),
                    "basic_sets": [{"label": b.label, "name": b.name, "point": b.point,
                                    "stable_dim": b.stable_dim, "unstable_dim": b.unstable_dim}
                                   for b in m.basic_sets]})
    return {"models": out}, True


def _cmd_generate(config):
    model = _model(config)
    seed = config.get("seed", 0)
    xi = _trajectory(model, config, seed)
    ok, top = validate(model, xi)
    return {"trajectory": xi, "valid": ok, "max_jump": top}, ok


def _read_trajectory(path):
    with open(path) as fh:
        return Pseudotrajectory.from_csv(fh.read())


def _cmd_classify(config):
    try:
        xi = _read_trajectory(config["input"])
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"cannot read {config['input']}: {exc}") from exc
    model = _model({"model": config.get("model", xi.model_id), "params": config.get("params", {})})
    s0 = config.get("s0", len(model.basic_sets))
    seg = classify(xi, model, config.get("L", 10), config.get("N", 1), s0)
    return {"segmentation": seg.to_json() if seg else "none"}, True


def _cmd_shadow(config):
    model = _model(config)
    seed, trials = config.get("seed", 0), config.get("trials", 1)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda i: _shadow_trial(model, config, seed + i), range(trials)))
    return {"trials": results}, all(r["verified"] for r in results)


def _cmd_transversality(config):
    model = _model(config)
    g = connection_digraph(model, samples=8)
    out = []
    for a, b in sorted(g.edges):
        q, p = connection_query(model, a, b)
        res = t_condition(q)
        out.append({"source": a, "target": b, "kind": res.kind, "degree": res.degree,
                    "radius": res.radius, "point": [float(c) for c in p]})
    return {"connections": out}, all(r["kind"] != "trivial" for r in out)


def _cmd_digraph(config):
    model = _model(config)
    g = connection_digraph(model, samples=8)
    cycle = has_cycle(g)
    out = g.to_json()
    out["acyclic"] = cycle is None
    out["cycle"] = cycle
    out["order"] = topological_order(g) if cycle is None else None
    return out, cycle is None


def _cmd_constants(config):
    model = _model(config)
    hc = estimate_constants(model, samples=config.get("trials", 2000), rng_seed=config.get("seed", 0))
    return {"C0": hc.C0, "lambda": hc.lam, "lambda_closed_form": hc.lam_closed, "alpha_bar": hc.alpha_bar,
            "mu": hc.mu, "C_product": hc.C_product, "C_bracket": hc.C_bracket}, True


def _cmd_report(config):
    records = []
    for path in config.get("inputs", []) + ([config["input"]] if "input" in config else []):
        try:
            with open(path) as fh:
                records.append(json.load(fh))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read record {path}: {exc}") from exc
    return {"csv": report(records)}, True


HANDLERS = {"models": _cmd_models, "generate": _cmd_generate, "classify": _cmd_classify,
            "shadow": _cmd_shadow, "transversality": _cmd_transversality, "digraph": _cmd_digraph,
            "constants": _cmd_constants, "report": _cmd_report}


def run(config):
    """Validate, dispatch and wrap the result as a record; returns (record, ok)."""
    validate_config(config)
    start = time.perf_counter()
    result, ok = HANDLERS[config["command"]](config)
    record = {"config": config, "config_hash": config_hash(config), "version": __version__,
              "ok": bool(ok), "result": result,
              "timing": {"seconds": round(time.perf_counter() - start, 3)}}
    return record, ok


REPORT_COLUMNS = ["model", "d", "trials", "pass_rate", "mean_deviation", "deviation_over_d", "ratio",
                  "alpha_max", "beta_max"]


def report(records):
    """Summary rows per (model, d), sorted; ratio compares deviation/d with the group's first row."""
    groups = {}
    for rec in records:
        cfg = rec.get("config", {})
        if cfg.get("command") != "shadow":
            continue
        for t in rec.get("result", {}).get("trials", []):
            groups.setdefault((cfg.get("model", "?"), t["d"]), []).append(t)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    first = {}
    for (model, d), trials in sorted(groups.items()):
        devs = [t["max_deviation"] for t in trials if t.get("max_deviation") is not None]
        mean = float(np.mean(devs)) if devs else math.nan
        per_d = mean / d if d else math.nan
        first.setdefault(model, per_d)
        ratio = per_d / first[model] if first[model] else math.nan
        w.writerow([model, repr(d), len(trials), sum(bool(t["verified"]) for t in trials) / len(trials),
                    repr(mean), repr(per_d), repr(ratio),
                    repr(max((t.get("alpha_max", math.nan) for t in trials), default=math.nan)),
                    repr(max((t.get("beta_max", math.nan) for t in trials), default=math.nan))])
    return buf.getvalue()


def _render(record, fmt):
    result = record["result"]
    cmd = record["config"]["command"]
    if cmd == "report":
        return result["csv"]
    if cmd == "generate":
        xi = result["trajectory"]
        if fmt == "csv":
            return xi.to_csv()
        result = {"header": xi.header(), "points": xi.points.tolist(), "valid": result["valid"],
                  "max_jump": result["max_jump"]}
        record = dict(record, result=result)
    if fmt == "csv" and cmd == "shadow":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "ell", "alpha", "beta", "base", "diam"])
        for t in result["trials"]:
            for e in t.get("ledger") or []:
                w.writerow([t["seed"], e["ell"], repr(e["alpha"]), repr(e["beta"]),
                            " ".join(repr(c) for c in e["base"]), repr(e["diam"])])
        return buf.getvalue()
    return json.dumps(record, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def build_parser():
    ap = argparse.ArgumentParser(prog="shadowlab", description="Shadowing experiments on shipped models.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file; flags override its entries")
    ap.add_argument("--model")
    ap.add_argument("--params", help="model parameters as a JSON object")
    ap.add_argument("--d", type=float)
    ap.add_argument("--eps", type=float)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--trials", type=int)
    ap.add_argument("--L", type=float)
    ap.add_argument("--N", type=int)
    ap.add_argument("--s0", type=int)
    ap.add_argument("--chain", help="comma-separated basic-set labels for crafted trajectories")
    ap.add_argument("--dwell", type=int)
    ap.add_argument("--input", nargs="+")
    ap.add_argument("--out")
    ap.add_argument("--format", choices=["json", "csv"])
    return ap


def config_from_args(args):
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
    config["command"] = args.command
    for key in ("model", "d", "eps", "steps", "seed", "trials", "L", "N", "s0", "dwell", "out", "format"):
        val = getattr(args, key)
        if val is not None:
            config[key] = val
    if args.params:
        config["params"] = json.loads(args.params)
    if args.chain:
        config["chain"] = [int(c) for c in args.chain.split(",")]
    if args.input:
        if args.command == "report":
            config["inputs"] = list(args.input)
        else:
            config["input"] = args.input[0]
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        record, ok = run(config)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fmt = config.get("format") or ("csv" if config["command"] == "report" else "json")
    text = _render(record, fmt)
    if config.get("out"):
        atomic_write(config["out"], text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_UNVERIFIED


if __name__ == "__main__":
    sys.exit(main())
