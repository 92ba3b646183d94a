"""Command-line entry point: run sweeps, check bounds, list environments, export plot data.

Usage:
    tabular-imitation run --config exp.json [--seed 3] [--out results/] [--mode exact]
    tabular-imitation verify-bounds --config exp.json [--check results/sweep.csv]
    tabular-imitation list-envs
    tabular-imitation export-plotdata results/sweep.csv --out plots/

Exit codes: 0 success, 1 runtime or bound failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import scipy

from . import __version__
from .analysis import (
    ALGORITHMS,
    AlgoSpec,
    RunResult,
    SweepResult,
    fit_scaling_exponent,
    fits_to_csv,
    horizon_sweep,
    plot_rows,
    spec_to_dict,
)
from .environments import ENV_SCHEMAS, make_env

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
REGRET_TOL = 1e-9

_ALGO_SCHEMA = {
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"enum": list(ALGORITHMS)},
        "training": {"enum": ["forward", "iterative"]},
        "fclass": {"enum": ["full", "learner", "constant"]},
        "alpha": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "iterations": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["env", "horizons"],
    "additionalProperties": False,
    "properties": {
        "env": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": sorted(ENV_SCHEMAS)},
                "params": {"type": "object"},
            },
        },
        "algorithm": _ALGO_SCHEMA,
        "algorithms": {"type": "array", "minItems": 1, "items": _ALGO_SCHEMA},
        "mode": {
            "oneOf": [
                {"enum": ["exact", "sampled"]},
                {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["exact", "sampled"]},
                        "n_demos": {"type": "integer", "minimum": 1},
                        "n_rollouts": {"type": "integer", "minimum": 1},
                    },
                },
            ]
        },
        "horizons": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "output_dir": {"type": "string"},
    },
    "oneOf": [{"required": ["algorithm"]}, {"required": ["algorithms"]}],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str
    env_params: dict
    algorithms: list
    mode: str
    n_demos: int
    n_rollouts: int
    horizons: list
    seeds: list
    output_dir: str
    raw: dict

    def digest(self) -> str:
        """Hash of the experiment definition; the output location is not part of it."""
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def load_config(path: str, seed: Optional[int] = None, out: Optional[str] = None,
                mode: Optional[str] = None) -> ExperimentConfig:
    """Parse, schema-check and normalise a JSON experiment config, applying CLI overrides."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.path) or "<root>"
        raise ConfigError(f"config field '{where}': {err.message}")
    if seed is not None:
        doc["seeds"] = [seed]
    if out is not None:
        doc["output_dir"] = out
    if mode is not None:
        doc["mode"] = mode if not isinstance(doc.get("mode"), dict) else {**doc["mode"], "kind": mode}
    m = doc.get("mode", "exact")
    kind = m if isinstance(m, str) else m["kind"]
    n_demos = 200 if isinstance(m, str) else m.get("n_demos", 200)
    n_rollouts = 100 if isinstance(m, str) else m.get("n_rollouts", 100)
    horizons = sorted(doc["horizons"])
    params = dict(doc["env"].get("params", {}))
    try:
        make_env(doc["env"]["name"], horizons[0], **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field 'env.params': {exc}") from exc
    raw_algos = doc["algorithms"] if "algorithms" in doc else [doc["algorithm"]]
    algos = []
    for i, a in enumerate(raw_algos):
        try:
            algos.append(AlgoSpec(**a))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config field 'algorithms.{i}': {exc}") from exc
    return ExperimentConfig(
        env=doc["env"]["name"],
        env_params=params,
        algorithms=algos,
        mode=kind,
        n_demos=n_demos,
        n_rollouts=n_rollouts,
        horizons=horizons,
        seeds=list(doc.get("seeds", [0])),
        output_dir=doc.get("output_dir", "results"),
        raw=doc,
    )


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _execute(cfg: ExperimentConfig, collect: Optional[list] = None) -> SweepResult:
    def keep(run: RunResult):
        if collect is not None:
            collect.append(run)

    return horizon_sweep(
        cfg.env, cfg.env_params, cfg.horizons, cfg.algorithms, cfg.seeds, cfg.mode,
        n_demos=cfg.n_demos, n_rollouts=cfg.n_rollouts, min_horizons=1, on_run=keep,
    )


def _manifest(cfg: ExperimentConfig) -> str:
    doc = {
        "config": cfg.raw,
        "config_sha256": cfg.digest(),
        "seeds": cfg.seeds,
        "mode": cfg.mode,
        "algorithms": [spec_to_dict(s) for s in cfg.algorithms],
        "versions": {
            "artifact": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _summary(sweep: SweepResult) -> str:
    seen, lines = set(), [f"{'algo':<18} {'T':>5} {'seed':>5} {'regret':>14}"]
    for r in sweep.sorted_rows():
        key = (r.algo, r.T, r.seed)
        if key in seen:
            continue
        seen.add(key)
        lines.append(f"{r.algo:<18} {r.T:>5} {r.seed:>5} {r.regret:>14.6g}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.mode)
    out = Path(cfg.output_dir)
    runs: list[RunResult] = []
    sweep = _execute(cfg, runs)
    atomic_write(out / "sweep.csv", sweep.to_csv())
    if sweep.errors:
        atomic_write(out / "errors.csv", sweep.errors_csv())
    for run in runs:
        stem = f"{run.spec.label}_T{run.bundle.mdp.horizon}_seed{run.seed}"
        atomic_write(out / "reports" / f"{stem}.csv", run.report.to_csv())
        doc = {**json.loads(run.report.policy_json()), "alpha": run.alpha}
        atomic_write(out / "policies" / f"{stem}.json", json.dumps(doc, sort_keys=True) + "\n")
    atomic_write(out / "manifest.json", _manifest(cfg))
    _say(args, _summary(sweep))
    _say(args, f"wrote {len(sweep.rows)} rows to {out / 'sweep.csv'}")
    return _report_errors(sweep)


def _report_errors(sweep: SweepResult) -> int:
    for env, T, algo, seed, msg in sorted(sweep.errors):
        print(f"error: {algo} on {env} (T={T}, seed={seed}): {msg}", file=sys.stderr)
    return EXIT_FAIL if sweep.errors else EXIT_OK


def _compare(reference: SweepResult, claimed: SweepResult) -> list[str]:
    """Differences between a re-run and a supplied sweep file."""
    problems = []
    if len(reference.rows) != len(claimed.rows):
        problems.append(f"row count {len(claimed.rows)} differs from re-run ({len(reference.rows)})")
    for i, (a, b) in enumerate(zip(reference.sorted_rows(), claimed.sorted_rows())):
        if (a.algo, a.T, a.seed, a.bound_thm) != (b.algo, b.T, b.seed, b.bound_thm):
            problems.append(f"row {i + 1}: identifies a different run")
        elif abs(a.regret - b.regret) > REGRET_TOL:
            problems.append(f"row {i + 1} ({b.algo}, T={b.T}): regret {b.regret!r} does not match re-run {a.regret!r}")
    return problems


def cmd_verify_bounds(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.mode)
    sweep = _execute(cfg)
    status = _report_errors(sweep)
    lines = [f"{'algo':<18} {'T':>5} {'theorem':<16} {'holds':<6} {'slack':>14}"]
    for r in sweep.sorted_rows():
        lines.append(f"{r.algo:<18} {r.T:>5} {r.bound_thm:<16} {r.holds:<6} {r.slack:>14.6g}")
        if r.holds == "false":
            status = EXIT_FAIL
    _say(args, "\n".join(lines))
    if args.check:
        try:
            claimed = SweepResult.from_csv(Path(args.check).read_text())
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot read {args.check}: {exc}", file=sys.stderr)
            return EXIT_FAIL
        problems = _compare(sweep, claimed)
        problems += [f"{r.algo}, T={r.T}: recorded regret exceeds its bound" for r in claimed.rows
                     if r.holds == "true" and r.regret > r.bound_rhs + REGRET_TOL]
        for p in problems:
            print(f"mismatch: {p}", file=sys.stderr)
        if problems:
            status = EXIT_FAIL
    n_fail = sum(r.holds == "false" for r in sweep.rows)
    _say(args, f"{len(sweep.rows)} checks, {n_fail} violations")
    return status


def cmd_list_envs(args) -> int:
    for name in sorted(ENV_SCHEMAS):
        print(name)
        for key, desc in ENV_SCHEMAS[name].items():
            print(f"  {key}: {desc}")
    return EXIT_OK


def cmd_export_plotdata(args) -> int:
    try:
        sweep = SweepResult.from_csv(Path(args.sweep).read_text())
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read {args.sweep}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out or ".")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["env", "algo", "T", "log_T", "log_regret"])
    rows = plot_rows(sweep)
    w.writerows(rows)
    fits = []
    for env, algo in sorted({(r.env, r.algo) for r in sweep.rows}):
        try:
            fits.append(fit_scaling_exponent(sweep, algo, env))
        except ValueError as exc:
            print(f"note: no fit for {exc}", file=sys.stderr)
    atomic_write(out / "plotdata.csv", buf.getvalue())
    atomic_write(out / "fits.csv", fits_to_csv(fits))
    for f in fits:
        _say(args, f"{f.env:<14} {f.algo:<18} beta={f.beta:.3f} r2={f.r_squared:.4f}")
    _say(args, f"wrote {len(rows)} plot rows and {len(fits)} fits to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabular-imitation", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config's seed list with one seed")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--mode", choices=["exact", "sampled"], help="override demonstration mode")
        p.add_argument("--quiet", action="store_true", help="suppress tables")

    p_run = sub.add_parser("run", help="run a horizon sweep and write results")
    experiment_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_ver = sub.add_parser("verify-bounds", help="run and check every applicable regret bound")
    experiment_flags(p_ver)
    p_ver.add_argument("--check", help="sweep CSV to compare against the re-run")
    p_ver.set_defaults(func=cmd_verify_bounds)

    p_list = sub.add_parser("list-envs", help="list environments and their parameters")
    p_list.add_argument("--quiet", action="store_true")
    p_list.set_defaults(func=cmd_list_envs)

    p_exp = sub.add_parser("export-plotdata", help="log-log plot data and exponent fits from a sweep CSV")
    p_exp.add_argument("sweep", help="sweep CSV written by `run`")
    p_exp.add_argument("--out", help="output directory (default: current)")
    p_exp.add_argument("--quiet", action="store_true")
    p_exp.set_defaults(func=cmd_export_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
