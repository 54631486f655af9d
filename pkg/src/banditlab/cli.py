"""Command-line entry point: ``banditlab <command> [--config PATH] [flags]``.

Configuration is a flat JSON object. Flags override file values and the
``BANDITLAB_SEED`` environment variable is the lowest-priority seed source.
All CSV output uses 17 significant digits, ``.`` decimals and LF endings,
so reruns with the same configuration are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .env import FAMILIES, EnvConfig, get_family
from .evalpolicy import write_table
from .harness import (
    ESTIMATORS,
    ExperimentSpec,
    InsufficientData,
    PolicySpec,
    allocation_experiment,
    calibration_table,
    evalpolicy_experiment,
    run_cell,
    summarize,
    uniformity_experiment,
    zstat_experiment,
)
from .policies import POLICY_KINDS

__all__ = ["ParseError", "ValidationError", "RunConfig", "parse_config", "dispatch", "main",
           "COVERAGE_HEADER"]

COMMANDS = ("coverage", "mse", "zstat", "allocation", "uniformity", "evalpolicy", "calibrate")
COVERAGE_HEADER = ["experiment", "family", "policy", "estimator", "region", "target", "T",
                   "alpha", "n_reps", "coverage", "coverage_se", "mean_volume", "volume_se",
                   "mse", "mse_se", "calibrated", "failures"]
FULL_SCALE_REPS = 5000

EXIT_OK, EXIT_INSUFFICIENT, EXIT_CONFIG = 0, 1, 2


class ParseError(ValueError):
    """The configuration file is missing or is not valid JSON."""


class ValidationError(ValueError):
    """One or more configuration values are invalid; ``violations`` lists them all."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "default"
    family: str = "t5"
    theta_star: tuple = (0.1, 0.1, 0.1, 0.0, 0.0, 0.0)
    context_dim: int = 2
    context_low: float = 0.0
    context_high: float = 5.0
    policy: str = "ts"
    clip: float = 0.01
    epsilon: float = 0.1
    p_fixed: float = 0.5
    hodges_power: float = 4.0
    noise_var: float = 1.0
    eval_policy: str = "uniform"
    estimators: tuple | None = None
    T_grid: tuple = (100, 316, 1000)
    n_reps: int = 1000
    alpha: float = 0.1
    target: str = "both"
    seed: int = 0
    n_pilot: int = 200
    chunk_size: int = 250
    calibration: str = "per_T"
    mab_theta: tuple | None = None
    delta: float = 0.0
    delta_grid: tuple = (0.0, 1e-3, 1e-2, 1e-1, 1.0)
    policies: tuple = ("fixed", "ts_hodges")
    output_dir: str = "out"
    threads: int = 1
    format: str = "csv"
    full_scale: bool = False

    def resolved_estimators(self) -> tuple:
        if self.estimators is not None:
            return tuple(self.estimators)
        if get_family(self.family).is_gaussian:
            return ("ols", "awls", "wdec", "selfnorm")
        return ("mle", "awmle")

    def effective_reps(self) -> int:
        return max(self.n_reps, FULL_SCALE_REPS) if self.full_scale else self.n_reps

    def experiment_spec(self) -> ExperimentSpec:
        env = EnvConfig(family=self.family, theta_star=tuple(self.theta_star),
                        context_dim=self.context_dim, context_low=self.context_low,
                        context_high=self.context_high)
        return ExperimentSpec(env=env, policy=self.policy_spec(self.policy),
                              eval_policy=self.eval_policy,
                              estimators=self.resolved_estimators(), T_grid=tuple(self.T_grid),
                              n_reps=self.effective_reps(), alpha=self.alpha, target=self.target,
                              master_seed=self.seed, n_pilot=self.n_pilot,
                              chunk_size=self.chunk_size)

    def policy_spec(self, kind: str) -> PolicySpec:
        return PolicySpec(kind=kind, clip=self.clip, epsilon=self.epsilon, p=self.p_fixed,
                          hodges_power=self.hodges_power, noise_var=self.noise_var)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TUPLE_KEYS = {"theta_star", "estimators", "T_grid", "mab_theta", "delta_grid", "policies"}
_INT_KEYS = {"context_dim", "n_reps", "seed", "n_pilot", "chunk_size", "threads"}
_FLOAT_KEYS = {"context_low", "context_high", "clip", "epsilon", "p_fixed", "hodges_power",
               "noise_var", "alpha", "delta"}
_STR_KEYS = {"experiment", "family", "policy", "eval_policy", "target", "output_dir", "format",
             "calibration"}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _check_types(raw: dict, errors: list) -> dict:
    clean = {}
    for key, v in raw.items():
        if key not in _FIELDS:
            errors.append(f"unknown key {key!r}")
            continue
        if key in _TUPLE_KEYS:
            if v is None and key in ("estimators", "mab_theta"):
                clean[key] = None
            elif not isinstance(v, list):
                errors.append(f"{key}: expected a list, got {type(v).__name__}")
            else:
                clean[key] = tuple(v)
        elif key in _INT_KEYS:
            if not _is_int(v):
                errors.append(f"{key}: expected an integer, got {v!r}")
            else:
                clean[key] = v
        elif key in _FLOAT_KEYS:
            if not _is_real(v):
                errors.append(f"{key}: expected a finite number, got {v!r}")
            else:
                clean[key] = float(v)
        elif key in _STR_KEYS:
            if not isinstance(v, str):
                errors.append(f"{key}: expected a string, got {v!r}")
            else:
                clean[key] = v
        elif key == "full_scale":
            if not isinstance(v, bool):
                errors.append(f"full_scale: expected true or false, got {v!r}")
            else:
                clean[key] = v
    return clean


def _check_values(cfg: RunConfig, errors: list) -> None:
    if cfg.family not in FAMILIES:
        errors.append(f"family: {cfg.family!r} is not one of {sorted(FAMILIES)}")
    if cfg.context_dim < 0:
        errors.append("context_dim must be nonnegative")
    elif len(cfg.theta_star) != 2 * (cfg.context_dim + 1):
        errors.append(f"theta_star must have length {2 * (cfg.context_dim + 1)}")
    if any(not _is_real(v) for v in cfg.theta_star):
        errors.append("theta_star entries must be finite numbers")
    if cfg.context_high < cfg.context_low:
        errors.append("context_high must be >= context_low")
    for key in ("policy",):
        if getattr(cfg, key) not in POLICY_KINDS:
            errors.append(f"{key}: {getattr(cfg, key)!r} is not one of {POLICY_KINDS}")
    bad = [p for p in cfg.policies if p not in POLICY_KINDS]
    if bad:
        errors.append(f"policies: unknown kinds {bad}")
    if not 0.0 < cfg.clip < 0.5:
        errors.append("clip must lie in (0, 0.5)")
    if not 0.0 <= cfg.epsilon <= 1.0:
        errors.append("epsilon must lie in [0, 1]")
    if not 0.0 <= cfg.p_fixed <= 1.0:
        errors.append("p_fixed must lie in [0, 1]")
    if cfg.noise_var <= 0.0:
        errors.append("noise_var must be positive")
    if cfg.eval_policy not in ("uniform", "expected_pi"):
        errors.append("eval_policy must be 'uniform' or 'expected_pi'")
    if cfg.estimators is not None:
        bad = [e for e in cfg.estimators if e not in ESTIMATORS]
        if bad or not cfg.estimators:
            errors.append(f"estimators: unknown {bad}; choose from {list(ESTIMATORS)}")
    grid = cfg.T_grid
    if not grid or any(not _is_int(t) or t < 1 for t in grid):
        errors.append("T_grid must be a non-empty list of positive integers")
    elif list(grid) != sorted(set(grid)):
        errors.append("T_grid must be strictly increasing")
    if cfg.n_reps < 2:
        errors.append("n_reps must be at least 2")
    if not 0.0 < cfg.alpha < 1.0:
        errors.append("alpha must lie in (0, 1)")
    if cfg.target not in ("full", "advantage", "both"):
        errors.append("target must be 'full', 'advantage' or 'both'")
    if not 0 <= cfg.seed < 2 ** 64:
        errors.append("seed must be an unsigned 64-bit integer")
    if cfg.n_pilot < 100:
        errors.append("n_pilot must be at least 100")
    if cfg.chunk_size < 1:
        errors.append("chunk_size must be positive")
    if cfg.mab_theta is not None and (len(cfg.mab_theta) != 2
                                      or any(not _is_real(v) for v in cfg.mab_theta)):
        errors.append("mab_theta must be a list of two numbers")
    if any(not _is_real(v) for v in cfg.delta_grid) or not cfg.delta_grid:
        errors.append("delta_grid must be a non-empty list of numbers")
    if cfg.threads < 1:
        errors.append("threads must be at least 1")
    if cfg.calibration not in ("per_T", "pooled"):
        errors.append("calibration must be 'per_T' or 'pooled'")
    if cfg.format not in ("csv", "json"):
        errors.append("format must be 'csv' or 'json'")


def _env_seed():
    raw = os.environ.get("BANDITLAB_SEED")
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw.strip(), 0)
    except ValueError:
        raise ValidationError([f"BANDITLAB_SEED: {raw!r} is not an integer"]) from None


def parse_config(source=None, overrides: dict | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig`.

    ``source`` is a path to a JSON file, a dict, or ``None`` for defaults.
    ``overrides`` (already typed) win over file values. The seed comes from,
    in order: overrides, the file, ``BANDITLAB_SEED``, the default 0.

    Raises
    ------
    ParseError
        Unreadable file or malformed JSON (with line and column).
    ValidationError
        Unknown keys or invalid values; every violation is listed.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ParseError(f"{path}: top level must be a JSON object")
    errors = []
    values = _check_types(raw, errors)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "seed" not in values:
        env_seed = _env_seed()
        if env_seed is not None:
            values["seed"] = env_seed
    cfg = RunConfig(**values)
    _check_values(cfg, errors)
    if errors:
        raise ValidationError(errors)
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


class _CsvOut:
    def __init__(self, path: Path, header):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.header = list(header)
        self.writer.writerow(self.header)

    def row(self, values):
        self.writer.writerow([_fmt(v) for v in values])
        self.fh.flush()

    def failed(self, message: str):
        self.writer.writerow(["FAILED", message] + [""] * (len(self.header) - 2))
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n",
                    encoding="utf-8")


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    _write_json(out / "config.json", {"command": command, "version": __version__,
                                      "config": cfg.to_dict()})


# ---------------------------------------------------------------------------
# commands


def _coverage_rows(cfg, spec, summaries):
    fam = spec.env.family.name
    for s in summaries:
        yield [cfg.experiment, fam, spec.policy.kind, s.estimator, s.region, s.target, s.T,
               s.alpha, s.n_reps, s.coverage, s.coverage_se, s.mean_volume, s.volume_se,
               s.mse, s.mse_se, s.calibrated, s.failures]


def _collect(cfg, spec):
    return [rec for T in spec.T_grid for rec in run_cell(spec, T, cfg.threads)]


def _cmd_coverage(cfg, out):
    spec = cfg.experiment_spec()
    records = _collect(cfg, spec)
    with _CsvOut(out / "coverage.csv", COVERAGE_HEADER) as w:
        try:
            rows = list(_coverage_rows(cfg, spec, summarize(
                records, spec.alpha, spec.estimators, spec.targets, cfg.calibration)))
        except InsufficientData as exc:
            w.failed(str(exc))
            raise
        for row in rows:
            w.row(row)
    if cfg.format == "json":
        _write_json(out / "coverage.json", [dict(zip(COVERAGE_HEADER, r)) for r in rows])


def _cmd_mse(cfg, out):
    spec = cfg.experiment_spec()
    records = _collect(cfg, spec)
    header = ["experiment", "family", "policy", "estimator", "target", "T", "n_reps", "mse",
              "mse_se", "failures"]
    with _CsvOut(out / "mse.csv", header) as w:
        try:
            sums = summarize(records, spec.alpha, spec.estimators, spec.targets)
        except InsufficientData as exc:
            w.failed(str(exc))
            raise
        for s in sums:
            w.row([cfg.experiment, spec.env.family.name, spec.policy.kind, s.estimator,
                   s.target, s.T, s.n_reps, s.mse, s.mse_se, s.failures])


def _cmd_calibrate(cfg, out):
    spec = cfg.experiment_spec()
    records = _collect(cfg, spec)
    header = ["experiment", "family", "policy", "estimator", "region", "target", "T", "alpha",
              "n_reps", "coverage", "scale", "calibrated_coverage"]
    with _CsvOut(out / "calibration.csv", header) as w:
        try:
            table = calibration_table(records, spec.alpha, spec.estimators, spec.targets)
        except InsufficientData as exc:
            w.failed(str(exc))
            raise
        for s, kappa in table:
            stats = [rec.estimates[s.estimator].regions[s.target].normalized
                     for rec in records if rec.T == s.T and s.estimator in rec.estimates]
            cal = float(np.mean(np.asarray(stats) <= kappa))
            w.row([cfg.experiment, spec.env.family.name, spec.policy.kind, s.estimator,
                   s.region, s.target, s.T, s.alpha, s.n_reps, s.coverage, kappa, cal])


def _cmd_zstat(cfg, out):
    theta = cfg.mab_theta if cfg.mab_theta is not None else (0.0, 0.0)
    res = zstat_experiment(cfg.effective_reps(), cfg.T_grid[-1], cfg.seed,
                           cfg.policy_spec(cfg.policy), theta)
    with _CsvOut(out / "zstat.csv", ["method", "rep", "value"]) as w:
        for method, sample in res["samples"].items():
            for i, v in enumerate(sample):
                w.row([method, i, v])
    with _CsvOut(out / "ks.csv", ["method", "ks_distance"]) as w:
        for method, d in res["ks"].items():
            w.row([method, d])


def _cmd_allocation(cfg, out):
    hist = ["policy", "delta", "T", "n_reps", "bin_lo", "bin_hi", "count"]
    summ = ["policy", "delta", "T", "n_reps", "mean", "variance", "binomial_variance"]
    with _CsvOut(out / "allocation.csv", hist) as wh, \
            _CsvOut(out / "allocation_summary.csv", summ) as ws:
        for kind in cfg.policies:
            for T in cfg.T_grid:
                res = allocation_experiment(cfg.policy_spec(kind), cfg.delta, T,
                                            cfg.effective_reps(), cfg.seed)
                edges = res["edges"]
                for j, c in enumerate(res["counts"]):
                    wh.row([kind, cfg.delta, T, cfg.effective_reps(), edges[j], edges[j + 1], c])
                ws.row([kind, cfg.delta, T, cfg.effective_reps(), res["mean"], res["variance"],
                        0.25 / T])


def _cmd_uniformity(cfg, out):
    header = ["policy", "delta", "T", "alpha", "n_reps", "coverage", "coverage_se", "failures"]
    policies = {k: cfg.policy_spec(k) for k in cfg.policies}
    rows = uniformity_experiment(tuple(cfg.delta_grid), cfg.T_grid[-1], cfg.effective_reps(),
                                 cfg.seed, cfg.alpha, policies)
    with _CsvOut(out / "uniformity.csv", header) as w:
        for r in rows:
            w.row([r[h] for h in header])


def _cmd_evalpolicy(cfg, out):
    theta = cfg.mab_theta if cfg.mab_theta is not None else (0.0, 1.0)
    T = cfg.T_grid[-1]
    res = evalpolicy_experiment(theta, T, cfg.effective_reps(), cfg.seed,
                                cfg.policy_spec(cfg.policy), n_pilot=max(cfg.n_pilot, 100))
    header = ["eval_policy", "T", "n_reps", "mse", "mse_se", "tmse_arm1", "predicted_tvar_arm1",
              "bound_tvar_arm1"]
    with _CsvOut(out / "evalpolicy.csv", header) as w:
        for label in ("uniform", "expected_pi"):
            w.row([label, T, res["n_reps"], res[f"mse_{label}"], res[f"mse_{label}_se"],
                   res[f"tmse_arm1_{label}"], res[f"predicted_tvar_arm1_{label}"],
                   res[f"bound_tvar_arm1_{label}"]])
    write_table(res["eval_table"], out / "eval_table.csv")


_COMMANDS = {
    "coverage": _cmd_coverage,
    "mse": _cmd_mse,
    "zstat": _cmd_zstat,
    "allocation": _cmd_allocation,
    "uniformity": _cmd_uniformity,
    "evalpolicy": _cmd_evalpolicy,
    "calibrate": _cmd_calibrate,
}


def dispatch(command: str, cfg: RunConfig) -> int:
    """Run ``command`` and write its outputs under ``cfg.output_dir``."""
    if command not in _COMMANDS:
        print(f"unknown command {command!r}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out, command)
    try:
        _COMMANDS[command](cfg, out)
    except InsufficientData as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="banditlab",
                                     description="Adaptively weighted M-estimation experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", metavar="PATH", help="JSON configuration file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", metavar="U64", type=lambda s: int(s, 0), help="master seed")
        p.add_argument("--reps", metavar="N", type=int, help="replications per cell")
        p.add_argument("--threads", metavar="K", type=int, help="worker threads")
        p.add_argument("--full-scale", action="store_true", default=None,
                       help=f"use at least {FULL_SCALE_REPS} replications")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    overrides = {"output_dir": args.out, "seed": args.seed, "n_reps": args.reps,
                 "threads": args.threads, "full_scale": args.full_scale}
    try:
        cfg = parse_config(args.config, overrides)
    except (ParseError, ValidationError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
