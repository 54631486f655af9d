"""Logging policies for two-arm (contextual) bandits.

Every policy state is *batched*: it carries ``n`` independent replications
side by side so the simulator can step many runs in lockstep. A state made
with ``n=None`` behaves as a single run and its probability functions return
plain floats.

Thompson Sampling keeps one Gaussian linear posterior per arm, prior
N(0, I_d), known observation-noise variance (default 1). Action
probabilities are the closed-form posterior probability that arm 1 has the
larger predicted reward, clipped to ``[clip, 1 - clip]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .statfn import normal_cdf, solve_spd

__all__ = [
    "POLICY_KINDS",
    "PolicyState",
    "make_policy",
    "clip_prob",
    "posterior_means",
    "ts_prob_arm1",
    "ts_hodges_prob",
    "eps_greedy_prob",
    "action_prob",
    "ts_update",
]

POLICY_KINDS = ("ts", "ts_hodges", "eps_greedy", "fixed", "uniform")


@dataclass
class PolicyState:
    """Mutable state of a logging policy for ``n`` parallel replications.

    ``precision`` has shape ``(n, 2, d, d)`` and ``moment`` shape ``(n, 2, d)``;
    index 1 on the second axis is arm 1. ``t`` counts completed steps.
    """

    kind: str
    dim: int
    precision: np.ndarray
    moment: np.ndarray
    clip: float = 0.01
    epsilon: float = 0.1
    p_fixed: float = 0.5
    hodges_power: float = 4.0
    noise_var: float = 1.0
    t: int = 0
    batched: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.precision.shape[0]

    def copy(self) -> "PolicyState":
        return PolicyState(
            kind=self.kind, dim=self.dim, precision=self.precision.copy(),
            moment=self.moment.copy(), clip=self.clip, epsilon=self.epsilon,
            p_fixed=self.p_fixed, hodges_power=self.hodges_power,
            noise_var=self.noise_var, t=self.t, batched=self.batched,
        )


def make_policy(kind: str, dim: int, n: int | None = None, *, clip: float = 0.01,
                epsilon: float = 0.1, p: float = 0.5, hodges_power: float = 4.0,
                noise_var: float = 1.0) -> PolicyState:
    """Fresh policy state with N(0, I_dim) priors on both arms.

    ``dim`` is the length of the intercept-augmented context. ``p`` is only
    used by ``kind="fixed"``; ``kind="uniform"`` is ``fixed`` with p = 0.5.
    """
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
    if not 0.0 < clip < 0.5:
        raise ValueError(f"clip must lie in (0, 0.5), got {clip!r}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon!r}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fixed probability must lie in [0, 1], got {p!r}")
    if noise_var <= 0.0:
        raise ValueError("noise_var must be positive")
    if kind == "uniform":
        kind, p = "fixed", 0.5
    size = 1 if n is None else int(n)
    precision = np.broadcast_to(np.eye(dim), (size, 2, dim, dim)).copy()
    moment = np.zeros((size, 2, dim))
    return PolicyState(kind=kind, dim=dim, precision=precision, moment=moment,
                       clip=clip, epsilon=epsilon, p_fixed=p,
                       hodges_power=hodges_power, noise_var=noise_var,
                       batched=n is not None)


def clip_prob(p, c: float):
    """Clip probabilities to ``[c, 1 - c]``."""
    if np.ndim(p) == 0:
        return max(c, min(1.0 - c, float(p)))
    return np.clip(p, c, 1.0 - c)


def _contexts(state: PolicyState, xtilde) -> np.ndarray:
    x = np.asarray(xtilde, dtype=float)
    if x.ndim == 1:
        x = np.broadcast_to(x, (state.n, x.shape[0]))
    if x.shape != (state.n, state.dim):
        raise ValueError(f"context shape {x.shape} does not match policy ({state.n}, {state.dim})")
    return x


def _solve_posteriors(state: PolicyState, x: np.ndarray):
    # one batched solve gives both the posterior means and P_a^{-1} x
    rhs = np.stack([state.moment, np.broadcast_to(x[:, None, :], state.moment.shape)], axis=-1)
    sol = np.linalg.solve(state.precision, rhs)
    return sol[..., 0], sol[..., 1]


def posterior_means(state: PolicyState) -> np.ndarray:
    """Posterior means of both arms, shape ``(n, 2, d)``."""
    return np.linalg.solve(state.precision, state.moment[..., None])[..., 0]


def _out(state: PolicyState, values: np.ndarray):
    return values if state.batched else float(values[0])


def _ts_raw(state: PolicyState, x: np.ndarray):
    means, pinv_x = _solve_posteriors(state, x)
    diff = np.sum(x * (means[:, 1] - means[:, 0]), axis=-1)
    var = np.sum(x * (pinv_x[:, 1] + pinv_x[:, 0]), axis=-1) * state.noise_var
    if np.any(var <= 0.0):
        raise np.linalg.LinAlgError("posterior predictive variance is not positive")
    return normal_cdf(diff / np.sqrt(var)), means


def ts_prob_arm1(state: PolicyState, xtilde):
    """Clipped Thompson Sampling probability of pulling arm 1 at context ``xtilde``."""
    x = _contexts(state, xtilde)
    prob, _ = _ts_raw(state, x)
    return _out(state, np.clip(prob, state.clip, 1.0 - state.clip))


def ts_hodges_prob(state: PolicyState, xtilde=None):
    """Thompson Sampling Hodges probability (intercept-only bandits).

    Falls back to 0.5 whenever the two posterior means are within
    ``t ** -hodges_power`` of each other, where ``t`` is the 1-based index of
    the step being decided. The result is clipped afterwards.
    """
    if state.dim != 1:
        raise ValueError("TS-Hodges is defined for intercept-only (multi-armed) bandits")
    x = _contexts(state, np.ones(1) if xtilde is None else xtilde)
    prob, means = _ts_raw(state, x)
    step = state.t + 1
    gap = np.abs(means[:, 1, 0] - means[:, 0, 0])
    prob = np.where(gap > float(step) ** (-state.hodges_power), prob, 0.5)
    return _out(state, np.clip(prob, state.clip, 1.0 - state.clip))


def eps_greedy_prob(state: PolicyState, xtilde):
    """epsilon-greedy on posterior-mean predicted reward; ties give 0.5."""
    x = _contexts(state, xtilde)
    means = posterior_means(state)
    pred1 = np.sum(x * means[:, 1], axis=-1)
    pred0 = np.sum(x * means[:, 0], axis=-1)
    eps = state.epsilon
    prob = np.where(pred1 > pred0, 1.0 - eps / 2.0, np.where(pred1 < pred0, eps / 2.0, 0.5))
    return _out(state, prob)


def action_prob(state: PolicyState, xtilde):
    """Probability of arm 1 under whichever rule ``state.kind`` names."""
    if state.kind == "ts":
        return ts_prob_arm1(state, xtilde)
    if state.kind == "ts_hodges":
        return ts_hodges_prob(state, xtilde)
    if state.kind == "eps_greedy":
        return eps_greedy_prob(state, xtilde)
    if state.kind == "fixed":
        return _out(state, np.full(state.n, state.p_fixed))
    raise ValueError(f"unknown policy kind {state.kind!r}")


def ts_update(state: PolicyState, xtilde, action, reward_pre) -> PolicyState:
    """Conjugate update of the chosen arm's posterior, in place.

    ``precision[a] += x x^T / s2`` and ``moment[a] += x r / s2``; the other arm
    is untouched. Returns ``state`` for chaining.
    """
    x = _contexts(state, xtilde)
    a = np.broadcast_to(np.asarray(action), (state.n,)).astype(np.intp)
    if np.any((a != 0) & (a != 1)):
        raise ValueError("actions must be 0 or 1")
    r = np.broadcast_to(np.asarray(reward_pre, dtype=float), (state.n,))
    rows = np.arange(state.n)
    s2 = state.noise_var
    state.precision[rows, a] += x[:, :, None] * x[:, None, :] / s2
    state.moment[rows, a] += x * (r / s2)[:, None]
    state.t += 1
    return state


def posterior_mean_single(state: PolicyState, arm: int, rep: int = 0) -> np.ndarray:
    """Posterior mean of one arm for one replication via :func:`solve_spd`."""
    return solve_spd(state.precision[rep, arm], state.moment[rep, arm])
