"""Stochastic two-arm contextual bandit environment and trajectory logging.

Contexts are i.i.d. ``Uniform(low, high)`` per coordinate with an intercept
prepended, giving ``xtilde = [1, x]``. The mean model is

    nu = xtilde . theta0 + a * xtilde . theta1

and rewards follow one of the outcome families below. The logging policy is
fed *preprocessed* rewards; trajectories keep both raw and preprocessed values
and estimators always consume the raw ones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .policies import PolicyState, action_prob, ts_update
from .statfn import RngStream, poisson_inverse, sample_t, sample_uniform

__all__ = [
    "GlmFamily",
    "FAMILIES",
    "get_family",
    "EnvConfig",
    "Trajectory",
    "TrajectoryBatch",
    "draw_context",
    "linear_predictor",
    "draw_reward",
    "preprocess_reward",
    "run_trajectory",
    "run_trajectories",
]


def _softplus(nu):
    return np.logaddexp(0.0, nu)


@dataclass(frozen=True)
class GlmFamily:
    """Outcome family with cumulant function ``b`` and its derivatives.

    ``noise`` is only meaningful for the Gaussian-mean families and names the
    additive error law (``"t5"`` or ``"normal"``).
    """

    name: str
    b: Callable = field(repr=False)
    b1: Callable = field(repr=False)
    b2: Callable = field(repr=False)
    noise: str | None = None
    reward_scale: float = 1.0
    reward_shift: float = 0.0

    @property
    def is_gaussian(self) -> bool:
        return self.noise is not None

    def mean(self, nu):
        return self.b1(nu)


def _half_square(nu):
    return 0.5 * np.square(nu)


def _identity(nu):
    return np.asarray(nu, dtype=float) * 1.0


def _ones(nu):
    return np.ones_like(np.asarray(nu, dtype=float))


FAMILIES = {
    "t5": GlmFamily("t5", _half_square, _identity, _ones, noise="t5"),
    "normal": GlmFamily("normal", _half_square, _identity, _ones, noise="normal"),
    "bernoulli": GlmFamily("bernoulli", _softplus, expit,
                           lambda nu: expit(nu) * expit(-np.asarray(nu, dtype=float)),
                           reward_scale=2.0, reward_shift=-1.0),
    "poisson": GlmFamily("poisson", np.exp, np.exp, np.exp, reward_scale=0.6),
}


def get_family(family) -> GlmFamily:
    if isinstance(family, GlmFamily):
        return family
    try:
        return FAMILIES[str(family).lower()]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class EnvConfig:
    """Environment parameters.

    ``theta_star`` stacks the baseline and advantage blocks
    ``[theta0, theta1]``, each of length ``context_dim + 1``.
    """

    family: GlmFamily | str = "t5"
    theta_star: tuple = (0.1, 0.1, 0.1, 0.0, 0.0, 0.0)
    context_dim: int = 2
    context_low: float = 0.0
    context_high: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        theta = tuple(float(v) for v in self.theta_star)
        object.__setattr__(self, "theta_star", theta)
        if self.context_dim < 0:
            raise ValueError("context_dim must be nonnegative")
        if len(theta) != 2 * (self.context_dim + 1):
            raise ValueError(
                f"theta_star has length {len(theta)}, expected {2 * (self.context_dim + 1)}"
            )
        if self.context_high < self.context_low:
            raise ValueError("context_high must be >= context_low")

    @property
    def k(self) -> int:
        """Length of the intercept-augmented context."""
        return self.context_dim + 1

    @property
    def d(self) -> int:
        """Number of model parameters."""
        return 2 * self.k

    @property
    def theta(self) -> np.ndarray:
        return np.asarray(self.theta_star)


def draw_context(cfg: EnvConfig, rng) -> np.ndarray:
    """One intercept-augmented context ``[1, u_1, ..., u_dim]``."""
    u = sample_uniform(rng, cfg.context_low, cfg.context_high, cfg.context_dim)
    return np.concatenate(([1.0], np.atleast_1d(u)))


def linear_predictor(theta, xtilde, a) -> float:
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(xtilde, dtype=float)
    if theta.shape != (2 * x.shape[-1],):
        raise ValueError(f"theta has shape {theta.shape}; expected ({2 * x.shape[-1]},)")
    k = x.shape[-1]
    return x @ theta[:k] + a * (x @ theta[k:])


def _rewards_from_innovation(family: GlmFamily, nu, innov):
    if family.is_gaussian:
        return nu + innov
    if family.name == "bernoulli":
        return (innov < expit(nu)).astype(float)
    if family.name == "poisson":
        return poisson_inverse(np.exp(nu), innov)
    raise ValueError(f"unsupported family {family.name!r}")


def _draw_innovations(family: GlmFamily, rng, size):
    if family.noise == "t5":
        return sample_t(5, rng, size)
    if family.noise == "normal":
        return rng.standard_normal(size)
    return rng.uniform(0.0, 1.0, size)


def draw_reward(family, nu: float, rng) -> float:
    """Single reward at linear predictor ``nu``."""
    family = get_family(family)
    if not math.isfinite(nu):
        raise ValueError("nu must be finite")
    return float(_rewards_from_innovation(family, nu, _draw_innovations(family, rng, None)))


def preprocess_reward(family, r):
    """Reward as handed to the learning algorithm.

    Bernoulli maps {0, 1} to {-1, +1}, Poisson scales by 0.6 and Gaussian
    families pass through.
    """
    family = get_family(family)
    return np.asarray(r, dtype=float) * family.reward_scale + family.reward_shift \
        if np.ndim(r) else float(r) * family.reward_scale + family.reward_shift


@dataclass
class Trajectory:
    """One logged bandit run of length ``T``."""

    contexts: np.ndarray
    actions: np.ndarray
    prob_arm1: np.ndarray
    rewards_raw: np.ndarray
    rewards_pre: np.ndarray

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def design(self) -> np.ndarray:
        """``Z_t = [xtilde_t, A_t xtilde_t]`` stacked row-wise."""
        return np.hstack([self.contexts, self.actions[:, None] * self.contexts])

    @property
    def propensity(self) -> np.ndarray:
        """Logged probability of the action actually taken."""
        return np.where(self.actions == 1, self.prob_arm1, 1.0 - self.prob_arm1)

    def to_csv(self, path) -> None:
        k = self.contexts.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"x{j}" for j in range(1, k + 1)]
                            + ["action", "prob_arm1", "reward_raw", "reward_pre"])
            for t in range(self.T):
                writer.writerow(
                    [t + 1] + [repr(float(v)) for v in self.contexts[t]]
                    + [int(self.actions[t]), repr(float(self.prob_arm1[t])),
                       repr(float(self.rewards_raw[t])), repr(float(self.rewards_pre[t]))]
                )


@dataclass
class TrajectoryBatch:
    """``n`` trajectories of equal length stored as ``(n, T, ...)`` arrays."""

    contexts: np.ndarray
    actions: np.ndarray
    prob_arm1: np.ndarray
    rewards_raw: np.ndarray
    rewards_pre: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.contexts[i], self.actions[i], self.prob_arm1[i],
                          self.rewards_raw[i], self.rewards_pre[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def design(self) -> np.ndarray:
        return np.concatenate([self.contexts, self.actions[..., None] * self.contexts], axis=-1)

    @property
    def propensity(self) -> np.ndarray:
        return np.where(self.actions == 1, self.prob_arm1, 1.0 - self.prob_arm1)


def _draw_run(cfg: EnvConfig, rng, T: int):
    # fixed draw order per replication: contexts, action uniforms, reward innovations
    u = sample_uniform(rng, cfg.context_low, cfg.context_high, (T, cfg.context_dim))
    action_u = sample_uniform(rng, 0.0, 1.0, T)
    innov = _draw_innovations(cfg.family, rng, T)
    return u, action_u, innov


def run_trajectories(cfg: EnvConfig, policy: PolicyState, T: int,
                     rngs: Sequence[RngStream]) -> TrajectoryBatch:
    """Run ``len(rngs)`` independent replications in lockstep.

    Each replication draws all of its randomness from its own stream, so a
    replication's trajectory does not depend on which batch it is run in.
    ``policy`` must hold ``len(rngs)`` replications and is updated in place.
    """
    if T < 1:
        raise ValueError("horizon T must be at least 1")
    n = len(rngs)
    if policy.n != n:
        raise ValueError(f"policy holds {policy.n} replications, got {n} streams")
    if policy.dim != cfg.k:
        raise ValueError(f"policy dimension {policy.dim} != context length {cfg.k}")
    draws = [_draw_run(cfg, rng, T) for rng in rngs]
    x = np.concatenate([np.ones((n, T, 1)), np.stack([d[0] for d in draws])], axis=-1)
    action_u = np.stack([d[1] for d in draws])
    innov = np.stack([d[2] for d in draws])

    theta = cfg.theta
    nu0 = x @ theta[:cfg.k]
    nu1 = nu0 + x @ theta[cfg.k:]
    fam = cfg.family
    r0 = _rewards_from_innovation(fam, nu0, innov)
    r1 = _rewards_from_innovation(fam, nu1, innov)

    prob = np.empty((n, T))
    actions = np.empty((n, T), dtype=np.int64)
    for t in range(T):
        p = np.asarray(action_prob(policy, x[:, t]), dtype=float).reshape(n)
        prob[:, t] = p
        a = (action_u[:, t] < p).astype(np.int64)
        actions[:, t] = a
        reward = np.where(a == 1, r1[:, t], r0[:, t])
        ts_update(policy, x[:, t], a, preprocess_reward(fam, reward))
    rewards = np.where(actions == 1, r1, r0)
    return TrajectoryBatch(x, actions, prob, rewards, preprocess_reward(fam, rewards))


def run_trajectory(cfg: EnvConfig, policy: PolicyState, T: int, rng) -> Trajectory:
    """Run one replication; ``policy`` must be a single-run state."""
    if not isinstance(rng, RngStream):
        raise TypeError("rng must be an RngStream")
    if policy.n != 1:
        raise ValueError("run_trajectory needs a single-replication policy state")
    was_batched = policy.batched
    policy.batched = True
    try:
        batch = run_trajectories(cfg, policy, T, [rng])
    finally:
        policy.batched = was_batched
    return batch[0]
