"""Monte Carlo experiment engine.

Replications are grouped into fixed-size chunks. Each chunk is simulated in
lockstep, and each replication draws from its own stream keyed by
``(master_seed, T, rep_index)``. Records are folded in rep-index order, so
summaries do not depend on the number of worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .env import EnvConfig, run_trajectories
from .estimators import (
    NonConvergence,
    aw_least_squares,
    aw_mle_glm,
    gram_min_eigenvalue,
    ridge_estimator,
    select_lambda_T,
    w_decorrelated,
)
from .evalpolicy import (
    EvalPolicy,
    awls_asymptotic_variance,
    estimate_expected_pi,
    eval_propensity,
)
from .policies import make_policy
from .regions import (
    block_normal_region,
    calibrate_cutoff,
    hotelling_region,
    project_ellipsoid,
    self_normalized_region,
    wdecorrelated_advantage_region,
    wdecorrelated_region,
)
from .statfn import make_stream, normal_quantile

__all__ = [
    "ESTIMATORS",
    "TARGETS",
    "InsufficientData",
    "PolicySpec",
    "ExperimentSpec",
    "RegionRecord",
    "EstimateRecord",
    "RepRecord",
    "McSummary",
    "prepare_context",
    "run_replication",
    "run_cell",
    "run_experiment",
    "summarize",
    "calibration_table",
    "zstat_experiment",
    "allocation_experiment",
    "uniformity_experiment",
    "evalpolicy_experiment",
]

ESTIMATORS = ("ols", "awls", "mle", "awmle", "wdec", "selfnorm")
TARGETS = ("full", "advantage")
_WEIGHTED = {"awls", "awmle"}
_ESTIMATOR_FAILURES = (np.linalg.LinAlgError, NonConvergence, ValueError, FloatingPointError)


class InsufficientData(RuntimeError):
    """A summary cell has fewer than two successful replications."""


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "ts"
    clip: float = 0.01
    epsilon: float = 0.1
    p: float = 0.5
    hodges_power: float = 4.0
    noise_var: float = 1.0

    def make(self, dim: int, n: int | None):
        return make_policy(self.kind, dim, n, clip=self.clip, epsilon=self.epsilon, p=self.p,
                           hodges_power=self.hodges_power, noise_var=self.noise_var)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one Monte Carlo study.

    ``target`` is ``"full"``, ``"advantage"`` or ``"both"``. ``chunk_size``
    fixes the lockstep batch size; it changes nothing about the records
    except through floating-point reassociation, and is kept constant so
    results are identical across thread counts.
    """

    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicySpec = field(default_factory=PolicySpec)
    eval_policy: str = "uniform"
    estimators: tuple = ("ols", "awls", "wdec", "selfnorm")
    T_grid: tuple = (100, 316, 1000)
    n_reps: int = 1000
    alpha: float = 0.1
    target: str = "both"
    master_seed: int = 0
    n_pilot: int = 200
    chunk_size: int = 250
    selfnorm_lam: float = 1.0
    selfnorm_sigma: float = 1.0
    selfnorm_S: float = 6.0

    def __post_init__(self):
        errors = []
        if self.n_reps < 2:
            errors.append("n_reps must be at least 2")
        if not 0.0 < self.alpha < 1.0:
            errors.append("alpha must lie in (0, 1)")
        grid = tuple(int(t) for t in self.T_grid)
        if not grid or list(grid) != sorted(set(grid)):
            errors.append("T_grid must be non-empty, strictly increasing")
        if any(t < 1 for t in grid):
            errors.append("every horizon must be positive")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            errors.append(f"unknown estimators {sorted(unknown)}; choose from {ESTIMATORS}")
        if self.target not in ("full", "advantage", "both"):
            errors.append("target must be 'full', 'advantage' or 'both'")
        if self.eval_policy not in ("uniform", "expected_pi"):
            errors.append("eval_policy must be 'uniform' or 'expected_pi'")
        if self.chunk_size < 1:
            errors.append("chunk_size must be positive")
        if errors:
            raise ValueError("; ".join(errors))
        object.__setattr__(self, "T_grid", grid)
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "master_seed", int(self.master_seed))

    @property
    def targets(self) -> tuple:
        return TARGETS if self.target == "both" else (self.target,)


@dataclass(frozen=True)
class RegionRecord:
    method: str
    normalized: float
    covered: bool
    volume: float
    dim: int


@dataclass(frozen=True)
class EstimateRecord:
    theta_hat: np.ndarray
    sq_error: float
    sq_error_adv: float
    zstat: float
    regions: dict


@dataclass(frozen=True)
class RepRecord:
    T: int
    rep: int
    allocation: float
    estimates: dict
    failures: dict


@dataclass(frozen=True)
class McSummary:
    estimator: str
    region: str
    target: str
    T: int
    alpha: float
    n_reps: int
    coverage: float
    coverage_se: float
    mean_volume: float
    volume_se: float
    mse: float
    mse_se: float
    calibrated: bool
    failures: int


# ---------------------------------------------------------------------------
# per-T context: pilot tuning that must not see the analysed replications


@dataclass(frozen=True)
class CellContext:
    lambda_T: float | None
    eval_policy: EvalPolicy


def _policy_factory(spec: ExperimentSpec):
    return lambda n: spec.policy.make(spec.env.k, n)


def prepare_context(spec: ExperimentSpec, T: int) -> CellContext:
    """Pilot-run quantities for horizon ``T`` drawn from dedicated streams."""
    lam = None
    if "wdec" in spec.estimators and T > math.e:
        rngs = [make_stream(spec.master_seed, "pilot-lambda", T, i) for i in range(spec.n_pilot)]
        batch = run_trajectories(spec.env, _policy_factory(spec)(spec.n_pilot), T, rngs)
        lam = select_lambda_T(gram_min_eigenvalue(batch.design), T)
        if not lam > 0.0:
            lam = None
    if spec.eval_policy == "expected_pi":
        ev = estimate_expected_pi(spec.env, _policy_factory(spec), T, max(100, spec.n_pilot),
                                  spec.master_seed)
    else:
        ev = EvalPolicy("uniform")
    return CellContext(lam, ev)


# ---------------------------------------------------------------------------
# estimator and region evaluation for one trajectory


def _region_record(region, theta_true, method) -> RegionRecord:
    s = region.normalized_statistic(theta_true)
    return RegionRecord(method, float(s), bool(s <= 1.0), float(region.volume()), region.dim)


def _sandwich_z(report, theta_true):
    se = math.sqrt(report.sandwich()[-1, -1] / report.T)
    return float((report.theta_hat[-1] - theta_true[-1]) / se)


def _evaluate(spec, name, Z, r, weights, theta_true, ctx, ols_report):
    alpha = spec.alpha
    k = spec.env.k
    fam = spec.env.family
    regions = {}
    if name in ("ols", "awls", "mle", "awmle"):
        w = weights if name in _WEIGHTED else None
        if name in ("mle", "awmle") and not fam.is_gaussian:
            report = aw_mle_glm(Z, r, fam, w)
        elif name == "ols" and ols_report is not None:
            report = ols_report
        else:
            report = aw_least_squares(Z, r, w)
        theta_hat = report.theta_hat
        zstat = _sandwich_z(report, theta_true)
        if "full" in spec.targets:
            regions["full"] = _region_record(hotelling_region(report, alpha), theta_true, "hotelling")
        if "advantage" in spec.targets:
            if name in _WEIGHTED:
                reg = project_ellipsoid(hotelling_region(report, alpha), k)
                regions["advantage"] = _region_record(reg, theta_true[k:], "projected")
            else:
                reg = block_normal_region(report, alpha, k)
                regions["advantage"] = _region_record(reg, theta_true[k:], "normal_block")
    elif name == "wdec":
        if ctx.lambda_T is None:
            raise ValueError("no usable lambda_T for this horizon")
        if ols_report is None:
            raise ValueError("W-decorrelation needs the least squares fit")
        theta_hat, V = w_decorrelated(Z, r, ctx.lambda_T, ols_report.theta_hat,
                                      ols_report.sigma2_hat)
        T = Z.shape[0]
        zstat = float((theta_hat[-1] - theta_true[-1]) / math.sqrt(V[-1, -1]))
        if "full" in spec.targets:
            regions["full"] = _region_record(wdecorrelated_region(theta_hat, V, T, alpha),
                                             theta_true, "hotelling")
        if "advantage" in spec.targets:
            reg = wdecorrelated_advantage_region(theta_hat, V, T, alpha, k)
            regions["advantage"] = _region_record(reg, theta_true[k:], "normal_block")
    elif name == "selfnorm":
        theta_hat, V = ridge_estimator(Z, r, spec.selfnorm_lam)
        ball = self_normalized_region(theta_hat, V, alpha, spec.selfnorm_lam,
                                      spec.selfnorm_sigma, spec.selfnorm_S)
        zstat = float("nan")
        if "full" in spec.targets:
            regions["full"] = _region_record(ball, theta_true, "self_normalized")
        if "advantage" in spec.targets:
            reg = project_ellipsoid(ball.to_ellipsoid(), k)
            regions["advantage"] = _region_record(reg, theta_true[k:], "projected")
    else:
        raise ValueError(f"unknown estimator {name!r}")
    err = theta_hat - theta_true
    return EstimateRecord(np.asarray(theta_hat), float(err @ err), float(err[k:] @ err[k:]),
                          zstat, regions)


def _records_for_trajectory(spec, ctx, T, rep, Z, r, prop, actions):
    theta_true = spec.env.theta
    estimates, failures = {}, {}
    weights = np.sqrt(eval_propensity(ctx.eval_policy, actions) / prop)
    ols_report = None
    if "ols" in spec.estimators or "wdec" in spec.estimators:
        try:
            ols_report = aw_least_squares(Z, r)
        except _ESTIMATOR_FAILURES:
            ols_report = None
    for name in spec.estimators:
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                estimates[name] = _evaluate(spec, name, Z, r, weights, theta_true, ctx, ols_report)
        except _ESTIMATOR_FAILURES as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"
    return RepRecord(T, rep, float(actions.mean()), estimates, failures)


def _run_block(spec: ExperimentSpec, T: int, reps, ctx: CellContext):
    reps = list(reps)
    rngs = [make_stream(spec.master_seed, "rep", T, i) for i in reps]
    batch = run_trajectories(spec.env, _policy_factory(spec)(len(reps)), T, rngs)
    Z, prop = batch.design, batch.propensity
    return [
        _records_for_trajectory(spec, ctx, T, rep, Z[j], batch.rewards_raw[j], prop[j],
                                batch.actions[j])
        for j, rep in enumerate(reps)
    ]


def run_replication(spec: ExperimentSpec, T: int, rep_index: int,
                    context: CellContext | None = None) -> RepRecord:
    """One replication at horizon ``T``; identical to its row in a full cell run."""
    if not 0 <= rep_index < spec.n_reps:
        raise IndexError(f"rep_index must lie in [0, {spec.n_reps})")
    ctx = prepare_context(spec, T) if context is None else context
    return _run_block(spec, T, [rep_index], ctx)[0]


def run_cell(spec: ExperimentSpec, T: int, threads: int = 1, context=None) -> list:
    """All replications at horizon ``T`` in rep-index order."""
    ctx = prepare_context(spec, T) if context is None else context
    size = spec.chunk_size
    chunks = [range(s, min(s + size, spec.n_reps)) for s in range(0, spec.n_reps, size)]
    if threads > 1 and len(chunks) > 1:
        parts = Parallel(n_jobs=threads, prefer="threads")(
            delayed(_run_block)(spec, T, c, ctx) for c in chunks)
    else:
        parts = [_run_block(spec, T, c, ctx) for c in chunks]
    return [rec for part in parts for rec in part]


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> list:
    return [rec for T in spec.T_grid for rec in run_cell(spec, T, threads)]


# ---------------------------------------------------------------------------
# aggregation


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def summarize(records, alpha: float, estimators=None, targets=TARGETS,
              calibration: str = "per_T") -> list:
    """Fold replication records into one :class:`McSummary` per cell.

    A (estimator, target) pair whose raw coverage is below ``1 - alpha`` at
    any horizon gets calibrated volumes at every horizon: the cutoff is
    rescaled by the empirical ``1 - alpha`` quantile of the normalized
    statistic, taken at each horizon (``"per_T"``) or over all horizons
    pooled (``"pooled"``). Reported coverage is always the raw one.
    """
    if calibration not in ("per_T", "pooled"):
        raise ValueError("calibration must be 'per_T' or 'pooled'")
    records = list(records)
    Ts = sorted({rec.T for rec in records})
    if estimators is None:
        seen = {name for rec in records for name in (*rec.estimates, *rec.failures)}
        estimators = [e for e in ESTIMATORS if e in seen]
    out = []
    for name in estimators:
        for target in targets:
            cells = {}
            for T in Ts:
                at_T = [rec for rec in records if rec.T == T]
                ok = [rec.estimates[name] for rec in at_T
                      if name in rec.estimates and target in rec.estimates[name].regions]
                if len(ok) < 2:
                    raise InsufficientData(
                        f"{name}/{target} at T={T}: {len(ok)} successful replications")
                cells[T] = (at_T, ok)
            if not cells:
                continue
            covs = {T: float(np.mean([e.regions[target].covered for e in ok]))
                    for T, (_, ok) in cells.items()}
            calibrate = any(c < 1.0 - alpha for c in covs.values())
            pooled = None
            if calibrate and calibration == "pooled":
                pooled = calibrate_cutoff([e.regions[target].normalized
                                           for _, ok in cells.values() for e in ok], alpha)
            for T, (at_T, ok) in cells.items():
                regs = [e.regions[target] for e in ok]
                n = len(ok)
                p = covs[T]
                vols = np.array([g.volume for g in regs])
                if calibrate:
                    kappa = pooled if pooled is not None else \
                        calibrate_cutoff([g.normalized for g in regs], alpha)
                    vols = vols * kappa ** (0.5 * regs[0].dim)
                sq = [e.sq_error if target == "full" else e.sq_error_adv for e in ok]
                mv, vse = _mean_se(vols)
                mse, mse_se = _mean_se(sq)
                out.append(McSummary(
                    estimator=name, region=regs[0].method, target=target, T=T, alpha=alpha,
                    n_reps=len(at_T), coverage=p, coverage_se=math.sqrt(p * (1.0 - p) / n),
                    mean_volume=mv, volume_se=vse, mse=mse, mse_se=mse_se,
                    calibrated=calibrate, failures=len(at_T) - n))
    return out


def calibration_table(records, alpha: float, estimators=None, targets=TARGETS) -> list:
    """Per-cell empirical cutoff scale ``kappa`` (1 means no rescaling needed)."""
    rows = []
    for s in summarize(records, alpha, estimators, targets):
        regs = [rec.estimates[s.estimator].regions[s.target] for rec in records
                if rec.T == s.T and s.estimator in rec.estimates]
        kappa = calibrate_cutoff([g.normalized for g in regs], alpha)
        rows.append((s, kappa))
    return rows


# ---------------------------------------------------------------------------
# multi-armed bandit demonstrations


def _mab_env(delta: float, family: str = "normal") -> EnvConfig:
    return EnvConfig(family=family, theta_star=(0.0, float(delta)), context_dim=0)


def _mab_batch(policy: PolicySpec, delta, T, n_reps, seed, tag):
    env = _mab_env(delta)
    rngs = [make_stream(seed, tag, T, float(delta), i) for i in range(n_reps)]
    return run_trajectories(env, policy.make(1, n_reps), T, rngs)


def _ks_fitted_normal(sample) -> float:
    x = np.asarray(sample, dtype=float)
    return float(stats.kstest(x / x.std(ddof=1), "norm").statistic)


def zstat_experiment(n_reps: int = 5000, T: int = 1000, seed: int = 0,
                     policy: PolicySpec | None = None, theta=(0.0, 0.0),
                     chunk_size: int = 1000) -> dict:
    """Arm-1 z-statistics of OLS and AW-LS in a two-arm bandit.

    OLS uses ``sqrt(N_1) (mean_1 - theta_1)`` and AW-LS uses
    ``T^{-1/2} sum_t (A_t / sqrt(pi_t)) (mean^AW_1 - theta_1)``, where
    ``theta_1`` is the arm-1 mean. Returns the samples and the KS distance of
    each to a normal with the sample's own scale.
    """
    policy = policy or PolicySpec("ts")
    env = EnvConfig(family="normal", theta_star=tuple(theta), context_dim=0)
    mean1 = float(theta[0] + theta[1])
    ols, aw = np.full(n_reps, np.nan), np.full(n_reps, np.nan)
    for start in range(0, n_reps, chunk_size):
        idx = range(start, min(start + chunk_size, n_reps))
        rngs = [make_stream(seed, "zstat", T, i) for i in idx]
        b = run_trajectories(env, policy.make(1, len(idx)), T, rngs)
        a, r, p1 = b.actions, b.rewards_raw, b.prob_arm1
        n1 = a.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ols_mean = (a * r).sum(axis=1) / n1
            w = a / np.sqrt(p1)
            aw_mean = (w * r).sum(axis=1) / w.sum(axis=1)
        ols[start:start + len(idx)] = np.sqrt(n1) * (ols_mean - mean1)
        aw[start:start + len(idx)] = w.sum(axis=1) / math.sqrt(T) * (aw_mean - mean1)
    samples = {"ols": ols[np.isfinite(ols)], "awls": aw[np.isfinite(aw)]}
    ks = {m: _ks_fitted_normal(s) for m, s in samples.items()}
    return {"samples": samples, "ks": ks, "failures": {m: int(n_reps - s.size) for m, s in samples.items()}}


def allocation_experiment(policy: PolicySpec, delta: float = 0.0, T: int = 100,
                          n_reps: int = 1000, seed: int = 0, bins: int = 50) -> dict:
    """Histogram and variance of the arm-1 allocation ``(1/T) sum A_t``."""
    b = _mab_batch(policy, delta, T, n_reps, seed, "allocation")
    alloc = b.actions.mean(axis=1)
    counts, edges = np.histogram(alloc, bins=bins, range=(0.0, 1.0))
    return {"allocation": alloc, "counts": counts, "edges": edges,
            "mean": float(alloc.mean()), "variance": float(alloc.var(ddof=1))}


def _ols_margin_coverage(batch, delta, alpha):
    """Coverage of the normal-approximation OLS interval for the margin."""
    a, r = batch.actions, batch.rewards_raw
    T = a.shape[1]
    n1 = a.sum(axis=1)
    n0 = T - n1
    ok = (n1 > 0) & (n0 > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        m1 = (a * r).sum(axis=1) / n1
        m0 = ((1 - a) * r).sum(axis=1) / n0
        resid = np.where(a == 1, r - m1[:, None], r - m0[:, None])
        sigma2 = np.mean(resid ** 2, axis=1)
        # last diagonal entry of ((1/T) Z'Z)^{-1} for Z = [1, A]
        var_delta = sigma2 * (1.0 / n1 + 1.0 / n0)
        z = np.abs(m1 - m0 - delta) / np.sqrt(var_delta)
    crit = normal_quantile(1.0 - alpha / 2.0)
    covered = z[ok] <= crit
    return float(covered.mean()), int(covered.size), int((~ok).sum())


def uniformity_experiment(delta_grid=(0.0, 1e-3, 1e-2, 1e-1, 1.0), T: int = 2000,
                          n_reps: int = 1000, seed: int = 0, alpha: float = 0.1,
                          policies=None) -> list:
    """Per-margin coverage of the OLS normal interval under several policies."""
    policies = policies or {"independent": PolicySpec("fixed", p=0.5),
                            "ts_hodges": PolicySpec("ts_hodges")}
    rows = []
    for label, pol in policies.items():
        for delta in delta_grid:
            b = _mab_batch(pol, delta, T, n_reps, seed, f"uniformity-{label}")
            cov, n, fail = _ols_margin_coverage(b, delta, alpha)
            rows.append({"policy": label, "delta": float(delta), "T": T, "alpha": alpha,
                         "n_reps": n_reps, "coverage": cov,
                         "coverage_se": math.sqrt(cov * (1.0 - cov) / n), "failures": fail})
    return rows


def evalpolicy_experiment(theta=(0.0, 1.0), T: int = 1000, n_reps: int = 2000, seed: int = 0,
                          policy: PolicySpec | None = None, n_pilot: int = 1000,
                          chunk_size: int = 500) -> dict:
    """AW-LS arm-mean MSE under uniform and expected-propensity evaluation policies.

    Also returns the predicted ``T * Var`` of the arm-1 mean from
    :func:`awls_asymptotic_variance` next to its empirical counterpart.
    """
    policy = policy or PolicySpec("ts")
    env = EnvConfig(family="normal", theta_star=tuple(theta), context_dim=0)
    means_true = np.array([theta[0], theta[0] + theta[1]])
    ev_exp = estimate_expected_pi(env, lambda n: policy.make(1, n), T, n_pilot, seed)
    policies = {"uniform": EvalPolicy("uniform"), "expected_pi": ev_exp}
    sq = {k: [] for k in policies}
    pred = {k: [] for k in policies}
    bound = {k: [] for k in policies}
    for start in range(0, n_reps, chunk_size):
        idx = range(start, min(start + chunk_size, n_reps))
        rngs = [make_stream(seed, "evalpolicy", T, i) for i in idx]
        b = run_trajectories(env, policy.make(1, len(idx)), T, rngs)
        a, r, p1 = b.actions, b.rewards_raw, b.prob_arm1
        prop = b.propensity
        for label, ev in policies.items():
            w = np.sqrt(eval_propensity(ev, a) / prop)
            est = np.empty((len(idx), 2))
            for arm in (0, 1):
                wa = w * (a == arm)
                est[:, arm] = (wa * r).sum(axis=1) / wa.sum(axis=1)
            sq[label].append((est - means_true) ** 2)
            # per-rep plug-in of the arm-1 variance law (unit noise variance)
            pe = eval_propensity(ev, np.ones_like(a))
            v, lb = awls_asymptotic_variance(
                np.ones(len(idx)), p1.mean(axis=1), pe.mean(axis=1),
                np.sqrt(p1 * pe).mean(axis=1))
            pred[label].append(v)
            bound[label].append(lb)
    out = {"T": T, "n_reps": n_reps, "eval_table": ev_exp}
    for label in policies:
        err = np.concatenate(sq[label])
        total = err.sum(axis=1)
        out[f"mse_{label}"] = float(total.mean())
        out[f"mse_{label}_se"] = float(total.std(ddof=1) / math.sqrt(total.size))
        out[f"tmse_arm1_{label}"] = float(T * err[:, 1].mean())
        out[f"predicted_tvar_arm1_{label}"] = float(np.concatenate(pred[label]).mean())
        out[f"bound_tvar_arm1_{label}"] = float(np.concatenate(bound[label]).mean())
    return out


def with_seed(spec: ExperimentSpec, seed: int) -> ExperimentSpec:
    return replace(spec, master_seed=int(seed))
