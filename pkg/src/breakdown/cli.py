"""Command-line entry point: ``breakdown <command> [flags]``.

Commands: estimate, bound, convexity, simulate, oracle-check. Reports are
JSON with sorted keys; every report embeds the effective configuration
(config file merged under explicit flags; ``out`` and ``threads`` are
omitted because they cannot change the numbers).

Exit codes: 0 success, 1 config or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from importlib import resources

import numpy as np

from .checks import run_battery
from .data import ConvergenceError, DataError, hellinger_lower_bound, load_csv, mcar_estimate, one_group_cells, x_marginals
from .divergence import parse_divergence
from .dual import DualError, DualOptions
from .harness import DESIGNS, StudyConfig, draw, get_design, run_study
from .inference import (
    EstimateOptions,
    EstimationError,
    InferenceError,
    attach_inference,
    convexity_scan,
    estimate_breakdown,
)
from .moments import (
    MODES,
    EmptyRegionError,
    Hypothesis,
    build_constraints,
    builtin_linear_iv,
    builtin_logit,
    builtin_mean,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("estimate", "bound", "convexity", "simulate", "oracle-check")
# never echoed: they cannot change a report's numbers
UNECHOED = ("out", "threads", "config", "rows")

_SOURCE = {"data": None, "design": None, "n": 10_000, "seed": 0}
_MODEL = {
    "model": None, "outcome": None, "regressors": None, "instruments": None,
    "mode": None, "hypothesis": None, "box_halfwidth": 2.0, "divergence": "sq-hellinger",
}
_SOLVER = {
    "dual_tol": 1e-9, "dual_max_iter": 200, "boundary_fraction": 0.995, "value_ceiling": 1e6,
    "pg_tol": 1e-7, "max_outer": 500, "n_starts": 2, "n_audit": 50,
}
DEFAULTS = {
    "estimate": {**_SOURCE, **_MODEL, **_SOLVER, "alpha": 0.05},
    "bound": {**_SOURCE, "mode": None},
    "convexity": {**_SOURCE, **_MODEL, **_SOLVER, "pairs": 10, "grid": 50},
    "simulate": {
        "design": None, "n": 4000, "reps": 200, "alpha": 0.05, "seed": 0, "truth": None,
        "divergence": "sq-hellinger", "n_starts": 2, "n_audit": 50,
    },
    "oracle-check": {"seed": 0, "instances": 60},
}
COMMON = {"threads": 1, "out": None, "config": None, "rows": None}


class ConfigError(ValueError):
    pass


# -- argument parsing ---------------------------------------------------------


def _add_source(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", help="CSV with columns d, y1..yk, x1..xm")
    g.add_argument("--design", choices=sorted(DESIGNS), help="draw a sample from a simulation design")
    p.add_argument("--n", type=int, help="sample size for --design")
    p.add_argument("--seed", type=int)


def _add_model(p):
    p.add_argument("--model", choices=("mean", "linear", "logit"))
    p.add_argument("--outcome", help="column of the outcome, e.g. y1 or x1")
    p.add_argument("--regressors", nargs="+")
    p.add_argument("--instruments", nargs="+")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--hypothesis", help="JSON text or @file: {\"box\": [[lo, hi], ...], \"null\": [{\"a\": [...], \"c\": v}]}")
    p.add_argument("--box-halfwidth", type=float, help="box = MCAR estimate +- this when the hypothesis omits a box")
    p.add_argument("--divergence", help="sq-hellinger | kl | reverse-kl | cressie-read:<gamma>")


def _add_solver(p):
    p.add_argument("--dual-tol", type=float)
    p.add_argument("--dual-max-iter", type=int)
    p.add_argument("--boundary-fraction", type=float)
    p.add_argument("--value-ceiling", type=float)
    p.add_argument("--pg-tol", type=float)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--n-starts", type=int)
    p.add_argument("--n-audit", type=int)


def _add_common(p):
    p.add_argument("--threads", type=int, help="worker budget (results do not depend on it)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="breakdown", description="Breakdown-point analysis for GMM under missing data.")
    sub = ap.add_subparsers(dest="command", required=True)
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("estimate", help="breakdown point, sandwich variance and lower CI", **kw)
    _add_source(p)
    _add_model(p)
    _add_solver(p)
    _add_common(p)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("bound", help="Hellinger lower bound from the X marginals", **kw)
    _add_source(p)
    _add_common(p)
    p.add_argument("--mode", choices=MODES)

    p = sub.add_parser("convexity", help="midpoint-convexity scan of the dual value", **kw)
    _add_source(p)
    _add_model(p)
    _add_solver(p)
    _add_common(p)
    p.add_argument("--pairs", type=int)
    p.add_argument("--grid", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo study of a design", **kw)
    p.add_argument("--design", choices=sorted(DESIGNS))
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--truth", type=float, help="reference breakdown point (default: stored value)")
    p.add_argument("--divergence")
    p.add_argument("--n-starts", type=int)
    p.add_argument("--n-audit", type=int)
    p.add_argument("--rows", help="write per-replication rows to this CSV")
    _add_common(p)

    p = sub.add_parser("oracle-check", help="cross-check the dual solver against the oracles", **kw)
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, help="random small instances in the duality sweep")
    _add_common(p)
    return ap


def resolve_config(argv) -> dict:
    """Defaults < config file < explicit flags."""
    args = vars(build_parser().parse_args(argv))
    cmd = args.pop("command")
    cfg = {**DEFAULTS[cmd], **COMMON}
    if args.get("config"):
        try:
            with open(args["config"], encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args['config']}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {unknown}")
        cfg.update(loaded)
    cfg.update(args)
    cfg["command"] = cmd
    return cfg


def echoed(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in UNECHOED}


# -- building blocks ---------------------------------------------------------


def _load_sample(cfg):
    if (cfg.get("data") is None) == (cfg.get("design") is None):
        raise ConfigError("exactly one of --data and --design is required")
    if cfg["design"] is not None:
        if cfg["n"] < 50:
            raise ConfigError("--n must be at least 50")
        return draw(cfg["design"], cfg["n"], cfg["seed"])
    mode = cfg.get("mode") or "full"
    return load_csv(cfg["data"], mode=mode)


def _model(cfg, sample):
    if cfg["design"] is not None:
        if cfg.get("model") is not None:
            raise ConfigError("--model cannot be combined with --design (the design fixes the model)")
        return get_design(cfg["design"]).model()
    name = cfg.get("model")
    if name is None:
        raise ConfigError("--model is required with --data")
    if name == "mean":
        return builtin_mean(cfg.get("outcome") or "y1")
    if not cfg.get("outcome") or not cfg.get("regressors"):
        raise ConfigError(f"--model {name} needs --outcome and --regressors")
    if name == "linear":
        return builtin_linear_iv(cfg["outcome"], cfg["regressors"], cfg.get("instruments"))
    return builtin_logit(cfg["outcome"], cfg["regressors"])


def _hypothesis_dict(raw):
    if raw is None:
        return None
    if isinstance(raw, dict):
        return raw
    text = raw
    if raw.startswith("@"):
        try:
            with open(raw[1:], encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read hypothesis file: {exc}") from None
    try:
        out = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"hypothesis is not valid JSON: {exc}") from None
    if not isinstance(out, dict):
        raise ConfigError("hypothesis must be a JSON object")
    return out


def _hypothesis(cfg, b_mcar):
    spec = _hypothesis_dict(cfg.get("hypothesis"))
    if spec is None:
        if cfg["design"] is None:
            raise ConfigError("--hypothesis is required with --data")
        return get_design(cfg["design"]).hypothesis(b_mcar)
    if not isinstance(spec.get("null", []), list):
        raise ConfigError("hypothesis 'null' must be a list of {a, c} objects")
    hw = float(cfg["box_halfwidth"])
    if not hw > 0:
        raise ConfigError("--box-halfwidth must be positive")
    box = spec.get("box")
    if box is None:
        box = np.column_stack([b_mcar - hw, b_mcar + hw]).tolist()
    try:
        return Hypothesis.from_dict({**spec, "box": box})
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed hypothesis: {exc!r}") from None


def _estimate_options(cfg) -> EstimateOptions:
    dual = DualOptions(
        tol=cfg["dual_tol"], max_iter=cfg["dual_max_iter"],
        boundary_fraction=cfg["boundary_fraction"], value_ceiling=cfg["value_ceiling"],
    )
    return EstimateOptions(
        n_starts=cfg["n_starts"], seed=cfg["seed"], n_audit=cfg["n_audit"], threads=cfg["threads"],
        pg_tol=cfg["pg_tol"], max_outer=cfg["max_outer"], dual=dual,
    )


def _setup(cfg):
    sample = _load_sample(cfg)
    model = _model(cfg, sample)
    mode = cfg.get("mode") or (get_design(cfg["design"]).mode if cfg["design"] else None)
    cs = build_constraints(model, sample, mode)
    b_mcar = mcar_estimate(sample, model)
    hyp = _hypothesis(cfg, b_mcar)
    if hyp.d_b != model.d_b:
        raise ConfigError(f"hypothesis has {hyp.d_b} coordinates, model {model.name} has {model.d_b}")
    spec = parse_divergence(cfg["divergence"])
    return sample, model, cs, b_mcar, hyp, spec


# -- commands -----------------------------------------------------------------


def cmd_estimate(cfg) -> dict:
    sample, model, cs, b_mcar, hyp, spec = _setup(cfg)
    res = estimate_breakdown(sample, model, cs, spec, hyp, _estimate_options(cfg), b_mcar=b_mcar)
    try:
        attach_inference(res, cs, spec, cfg["alpha"])
    except InferenceError:
        pass  # point estimate stands; the warning is in diagnostics
    return {
        "command": "estimate",
        "config": echoed(cfg),
        "model": model.name,
        "mode": cs.mode,
        "divergence": spec.name,
        "hypothesis": hyp.to_dict(),
        "b_mcar": b_mcar.tolist(),
        "hellinger_x": hellinger_lower_bound(sample),
        "result": res.to_dict(),
    }


def cmd_bound(cfg) -> dict:
    sample = _load_sample(cfg)
    if sample.d_x == 0:
        raise ConfigError("the sample has no X columns; the bound needs always-observed covariates")
    p0, p1 = x_marginals(sample)
    lone = one_group_cells(sample)
    return {
        "command": "bound",
        "config": echoed(cfg),
        "n": sample.n,
        "p_hat": sample.p_hat,
        "cells": sample.support.tolist(),
        "p0_x": p0.tolist(),
        "p1_x": p1.tolist(),
        "hellinger_x": hellinger_lower_bound(sample),
        "one_group_cells": lone,
        "warnings": ["cells-empty-in-one-group"] if lone else [],
    }


def cmd_convexity(cfg) -> dict:
    _, model, cs, _, hyp, spec = _setup(cfg)
    opts = _estimate_options(cfg)
    rep = convexity_scan(cs, spec, hyp.box, cfg["pairs"], cfg["grid"], cfg["seed"], opts.dual, cfg["threads"])
    return {
        "command": "convexity",
        "config": echoed(cfg),
        "model": model.name,
        "divergence": spec.name,
        "box": hyp.box.tolist(),
        "report": rep.to_dict(),
    }


def cmd_simulate(cfg) -> dict:
    if cfg.get("design") is None:
        raise ConfigError("--design is required")
    parse_divergence(cfg["divergence"])
    study = StudyConfig(
        design=cfg["design"], n=cfg["n"], replications=cfg["reps"], alpha=cfg["alpha"], seed=cfg["seed"],
        truth=cfg["truth"], divergence=cfg["divergence"], n_starts=cfg["n_starts"], n_audit=cfg["n_audit"],
        threads=cfg["threads"],
    )
    study.effective_truth  # fail fast before any replication runs
    rows = []
    summary = run_study(study, rows_out=rows)
    if cfg.get("rows"):
        with open(cfg["rows"], "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["replication", "delta_hat", "sigma_hat", "ci_lower", "error"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows({k: ("" if v is None else v) for k, v in r.items()} for r in rows)
    return {"command": "simulate", "config": echoed(cfg), "summary": summary.to_dict()}


def cmd_oracle_check(cfg) -> dict:
    checks = run_battery(seed=cfg["seed"], n_instances=cfg["instances"])
    return {
        "command": "oracle-check",
        "config": echoed(cfg),
        "checks": [c.to_dict() for c in checks],
        "all_passed": all(c.passed for c in checks),
    }


HANDLERS = {
    "estimate": cmd_estimate,
    "bound": cmd_bound,
    "convexity": cmd_convexity,
    "simulate": cmd_simulate,
    "oracle-check": cmd_oracle_check,
}


# -- output -------------------------------------------------------------------


def _clean(obj):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _fmt(v, spec=".4f"):
    return "--" if v is None else format(v, spec)


def _vec(v):
    return "(" + ", ".join(f"{x:.4f}" for x in v) + ")"


def text_table(report: dict) -> str:
    cmd = report["command"]
    if cmd == "estimate":
        r = report["result"]
        delta = "inf" if r["delta_hat_infinite"] else _fmt(r["delta_hat"])
        level = f"{100 * (1 - r['alpha']):g}%" if r["alpha"] is not None else ""
        se = None if r["sigma_hat"] is None else r["sigma_hat"] / math.sqrt(r["n"])
        rows = [
            ("n", str(r["n"])),
            ("P(D = 1)", f"{r['p_hat']:.4f}"),
            ("MCAR estimate", _vec(report["b_mcar"])),
            ("breakdown point", delta),
            ("std. error", _fmt(se)),
            (f"lower CI ({level})", _fmt(r["ci_lower"])),
            ("H2(P0X, P1X)", _fmt(report["hellinger_x"])),
            ("minimizer b*", _vec(r["b_star"])),
            ("warnings", ", ".join(r["diagnostics"].get("warnings", [])) or "none"),
        ]
        lines = [f"Breakdown point ({report['divergence']}, {report['model']}, mode {report['mode']})"]
        lines += [f"  {k:<20} {v}" for k, v in rows]
    elif cmd == "bound":
        lines = [f"H2(P0X, P1X) lower bound: {_fmt(report['hellinger_x'])}  (n = {report['n']})"]
    elif cmd == "convexity":
        rep = report["report"]
        lines = [
            f"max midpoint-convexity violation {rep['max_violation']:.3e} over {rep['triples_checked']} triples"
            f" ({rep['skipped']} infeasible points skipped)"
        ]
    elif cmd == "simulate":
        s = report["summary"]
        lines = [
            f"{report['config']['design']}  n = {report['config']['n']}  completed {s['completed']}, failed {s['failed']}",
            f"  mean bias {_fmt(s['mean_bias'])}  sd {_fmt(s['sd'])}  CI length {_fmt(s['mean_ci_length'])}"
            f"  coverage {_fmt(s['coverage'], '.3f')}",
        ]
    else:
        lines = [f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']:<45} {_fmt(c['value'], '.3e')}  (tol {c['tolerance']:g})"
                 for c in report["checks"]]
    return "\n".join(lines) + "\n"


def _error(code: str, exc: BaseException) -> dict:
    return {"error": code, "message": str(exc), "type": type(exc).__name__}


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        cfg = resolve_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    except ConfigError as exc:
        stdout.write(dumps(_error("config-error", exc)))
        return EXIT_CONFIG
    code = EXIT_OK
    try:
        if cfg["threads"] < 1:
            raise ConfigError("--threads must be at least 1")
        report = HANDLERS[cfg["command"]](cfg)
    except EmptyRegionError as exc:
        stdout.write(dumps(_error("empty-null-region", exc)))
        return EXIT_CONFIG
    except DataError as exc:
        stdout.write(dumps(_error("data-error", exc)))
        return EXIT_CONFIG
    except (DualError, EstimationError, ConvergenceError, np.linalg.LinAlgError) as exc:
        stdout.write(dumps(_error("numerical-failure", exc)))
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        stdout.write(dumps(_error("config-error", exc)))
        return EXIT_CONFIG
    if cfg["command"] == "oracle-check" and not report["all_passed"]:
        code = EXIT_NUMERIC
    text = dumps(report)
    if cfg.get("out"):
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
        stdout.write(text_table(report))
    else:
        stdout.write(text)
    return code


def load_schema(command: str) -> dict:
    name = "error" if command == "error" else command
    return json.loads(resources.files("breakdown").joinpath("schemas", f"{name}.json").read_text("utf-8"))


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
