"""Evaluation policies that define the square-root importance weights.

The uniform policy is the default. The expected-propensity policy sets
``pi_eval_{t,1} = E[pi_{t,1}]`` under the true environment, estimated from
independent pilot runs before any analysed data exists.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, run_trajectories
from .statfn import make_stream

__all__ = [
    "EvalPolicy",
    "uniform_policy",
    "eval_prob",
    "eval_propensity",
    "estimate_expected_pi",
    "awls_asymptotic_variance",
    "write_table",
    "read_table",
]


@dataclass(frozen=True)
class EvalPolicy:
    """Pre-specified action distribution; ``table[t-1]`` is the arm-1 probability."""

    kind: str = "uniform"
    table: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "expected_pi"):
            raise ValueError(f"unknown evaluation policy {self.kind!r}")
        if self.kind == "expected_pi":
            if self.table is None or len(self.table) == 0:
                raise ValueError("expected_pi policy needs a probability table")
            tab = tuple(float(v) for v in self.table)
            if any(not 0.0 < v < 1.0 for v in tab):
                raise ValueError("table probabilities must lie in (0, 1)")
            object.__setattr__(self, "table", tab)

    @property
    def T(self) -> int | None:
        return None if self.table is None else len(self.table)


def uniform_policy() -> EvalPolicy:
    return EvalPolicy("uniform")


def eval_prob(policy: EvalPolicy, t: int, arm: int) -> float:
    """Evaluation probability of ``arm`` at 1-based step ``t``."""
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if policy.kind == "uniform":
        if t < 1:
            raise IndexError(f"step {t} out of range")
        return 0.5
    if not 1 <= t <= len(policy.table):
        raise IndexError(f"step {t} out of range 1..{len(policy.table)}")
    p1 = policy.table[t - 1]
    return p1 if arm == 1 else 1.0 - p1


def eval_propensity(policy: EvalPolicy, actions) -> np.ndarray:
    """Evaluation probability of each logged action (last axis is time)."""
    actions = np.asarray(actions)
    if policy.kind == "uniform":
        return np.full(actions.shape, 0.5)
    table = np.asarray(policy.table)
    if actions.shape[-1] != table.size:
        raise ValueError(f"table has {table.size} steps, data has {actions.shape[-1]}")
    return np.where(actions == 1, table, 1.0 - table)


def estimate_expected_pi(cfg: EnvConfig, policy_factory, T: int, n_pilot: int,
                         seed: int, clamp: float = 0.01) -> EvalPolicy:
    """Average logged arm-1 probability over ``n_pilot`` pilot runs.

    ``policy_factory(n)`` must return a fresh batched policy state for ``n``
    runs. Pilot streams live in their own namespace, so they never overlap
    with the streams of analysed replications.
    """
    if n_pilot < 100:
        raise ValueError("n_pilot must be at least 100")
    rngs = [make_stream(seed, "pilot-expected-pi", T, i) for i in range(n_pilot)]
    batch = run_trajectories(cfg, policy_factory(n_pilot), T, rngs)
    table = np.clip(batch.prob_arm1.mean(axis=0), clamp, 1.0 - clamp)
    return EvalPolicy("expected_pi", tuple(table))


def awls_asymptotic_variance(sigma2, pi_bar, pi_eval_bar, cross_bar):
    """Per-arm asymptotic variance of AW-LS arm means and its lower bound.

    Returns ``(variance, bound)`` with ``variance = sigma2 * pi_eval_bar /
    cross_bar**2`` and the Cauchy-Schwarz bound ``sigma2 / pi_bar``.
    """
    sigma2, pi_bar, pi_eval_bar, cross_bar = (
        np.asarray(v, dtype=float) for v in (sigma2, pi_bar, pi_eval_bar, cross_bar))
    if np.any(sigma2 <= 0.0):
        raise ValueError("sigma2 must be positive")
    for name, v in (("pi_bar", pi_bar), ("pi_eval_bar", pi_eval_bar), ("cross_bar", cross_bar)):
        if np.any(v <= 0.0) or np.any(v > 1.0):
            raise ValueError(f"{name} must lie in (0, 1]")
    variance = sigma2 * pi_eval_bar / cross_bar ** 2
    bound = sigma2 / pi_bar
    # only holds when cross_bar really is the mean of sqrt(pi * pi_eval)
    if np.any(cross_bar ** 2 > pi_bar * pi_eval_bar * (1.0 + 1e-12)):
        raise ValueError("cross_bar**2 exceeds pi_bar * pi_eval_bar; inputs are inconsistent")
    assert np.all(variance >= bound - 1e-12)
    if variance.ndim == 0:
        return float(variance), float(bound)
    return variance, bound


def write_table(policy: EvalPolicy, path) -> None:
    if policy.kind != "expected_pi":
        raise ValueError("only expected_pi policies carry a table")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "pi_eval_arm1"])
        for t, p in enumerate(policy.table, start=1):
            writer.writerow([t, format(p, ".17g")])


def read_table(path) -> EvalPolicy:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["t", "pi_eval_arm1"]:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        rows = sorted((int(r["t"]), float(r["pi_eval_arm1"])) for r in reader)
    if [t for t, _ in rows] != list(range(1, len(rows) + 1)):
        raise ValueError("table steps must be 1..T without gaps")
    return EvalPolicy("expected_pi", tuple(p for _, p in rows))
