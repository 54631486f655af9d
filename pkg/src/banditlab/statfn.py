"""Special functions, samplers, random streams and small SPD linear algebra.

Everything else in the package sits on top of this module. The distribution
quantiles are obtained by bisection on our own regularized incomplete
gamma / beta evaluations; the dense linear algebra is thin validation around
LAPACK (matrices never exceed 16 x 16 here).
"""

from __future__ import annotations

import hashlib
import math
from functools import lru_cache

import numpy as np
from scipy import special

__all__ = [
    "NotPositiveDefinite",
    "RngStream",
    "make_stream",
    "normal_cdf",
    "normal_quantile",
    "regularized_gamma_p",
    "regularized_beta",
    "chi2_cdf",
    "chi2_quantile",
    "f_cdf",
    "f_quantile",
    "cholesky",
    "solve_spd",
    "logdet_spd",
    "sample_std_normal",
    "sample_uniform",
    "sample_t",
    "sample_poisson",
    "poisson_inverse",
    "sample_bernoulli",
]

_EPS = 1e-16
_TINY = 1e-300


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD has a non-positive pivot."""


# ---------------------------------------------------------------------------
# normal distribution


def normal_cdf(x):
    """Standard normal CDF, scalar or elementwise on arrays."""
    if np.ndim(x) == 0:
        x = float(x)
        if math.isnan(x):
            raise ValueError("normal_cdf requires a finite or infinite number, got nan")
        return 0.5 * math.erfc(-x / math.sqrt(2.0))
    return special.ndtr(np.asarray(x, dtype=float))


def normal_quantile(p: float) -> float:
    """Inverse of :func:`normal_cdf` on the open interval (0, 1)."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile requires 0 < p < 1, got {p!r}")
    x = float(special.ndtri(p))
    # one Newton polish step against our own cdf
    dens = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if dens > 0.0:
        x -= (normal_cdf(x) - p) / dens
    return x


# ---------------------------------------------------------------------------
# incomplete gamma / beta


def _gamma_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cfrac(a: float, x: float) -> float:
    # upper tail Q(a, x) via modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if a <= 0.0:
        raise ValueError("a must be positive")
    if x < 0.0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_cfrac(a, x))


def _beta_cfrac(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def regularized_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0.0 or b <= 0.0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cfrac(a, b, x) / a
    return 1.0 - front * _beta_cfrac(b, a, 1.0 - x) / b


def chi2_cdf(x: float, d: int) -> float:
    if x <= 0.0:
        return 0.0
    return regularized_gamma_p(0.5 * d, 0.5 * x)


def f_cdf(x: float, d1: int, d2: int) -> float:
    if x <= 0.0:
        return 0.0
    return regularized_beta(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2))


def _bisect_increasing(cdf, p: float, lo: float, hi: float) -> float:
    while cdf(hi) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _check_dof(name: str, value) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def _check_prob(p) -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p!r}")
    return p


@lru_cache(maxsize=4096)
def chi2_quantile(d: int, p: float) -> float:
    """Quantile of the chi-square distribution with ``d`` degrees of freedom."""
    d = _check_dof("d", d)
    p = _check_prob(p)
    if d == 2:
        return -2.0 * math.log1p(-p)
    return _bisect_increasing(lambda x: chi2_cdf(x, d), p, 0.0, max(1.0, 2.0 * d))


@lru_cache(maxsize=4096)
def f_quantile(d1: int, d2: int, p: float) -> float:
    """Quantile of the F distribution with ``(d1, d2)`` degrees of freedom."""
    d1 = _check_dof("d1", d1)
    d2 = _check_dof("d2", d2)
    p = _check_prob(p)
    return _bisect_increasing(lambda x: f_cdf(x, d1, d2), p, 0.0, 4.0)


# ---------------------------------------------------------------------------
# dense SPD linear algebra


def _as_square(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises
    ------
    ValueError
        If ``m`` is not symmetric to 1e-9 relative tolerance.
    NotPositiveDefinite
        If a pivot is at or below ``1e-12 * trace(m)``.
    """
    m = _as_square(m)
    scale = max(np.max(np.abs(m)), _TINY)
    if np.max(np.abs(m - m.T)) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric")
    m = 0.5 * (m + m.T)
    tr = float(np.trace(m))
    if not tr > 0.0:
        raise NotPositiveDefinite("matrix has non-positive trace")
    try:
        low = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.min(np.diag(low)) ** 2 <= 1e-12 * tr:
        raise NotPositiveDefinite("pivot below 1e-12 * trace")
    return low


def solve_spd(m, rhs) -> np.ndarray:
    """Solve ``m x = rhs`` for SPD ``m``; ``rhs`` may be a vector or a matrix."""
    low = cholesky(m)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != low.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, matrix has {low.shape[0]}")
    y = np.linalg.solve(low, rhs)
    return np.linalg.solve(low.T, y)


def logdet_spd(m) -> float:
    """log det of an SPD matrix via its Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diag(cholesky(m)))))


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Deterministic generator keyed by a master seed and a stream label.

    The same ``(seed, stream_id)`` pair always reproduces the same draws, no
    matter which process or in which order streams are created.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def chisquare(self, df, size=None):
        return self.generator.chisquare(df, size)


def stream_label(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a 64-bit stream label."""
    text = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def make_stream(seed: int, *parts) -> RngStream:
    return RngStream(seed, stream_label(*parts))


# ---------------------------------------------------------------------------
# samplers


def _gen(rng):
    return rng.generator if isinstance(rng, RngStream) else rng


def sample_std_normal(rng, size=None):
    return _gen(rng).standard_normal(size)


def sample_uniform(rng, lo: float = 0.0, hi: float = 1.0, size=None):
    if hi < lo:
        raise ValueError("uniform bounds must satisfy lo <= hi")
    return _gen(rng).uniform(lo, hi, size)


def sample_t(df: int, rng, size=None):
    """Student-t draws built as N(0, 1) / sqrt(chi2_df / df)."""
    df = _check_dof("df", df)
    g = _gen(rng)
    z = g.standard_normal(size)
    v = g.chisquare(df, size)
    return z / np.sqrt(v / df)


def poisson_inverse(lam, u):
    """Poisson quantile at uniform ``u`` by sequential search (elementwise)."""
    lam = np.asarray(lam, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(lam < 0.0) or not np.all(np.isfinite(lam)):
        raise ValueError("poisson rate must be finite and nonnegative")
    lam, u = np.broadcast_arrays(lam, u)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    k = np.zeros(lam.shape)
    active = u > cdf
    while np.any(active):
        k = np.where(active, k + 1.0, k)
        pmf = np.where(active, pmf * lam / np.maximum(k, 1.0), pmf)
        cdf = np.where(active, cdf + pmf, cdf)
        # guard against cdf stalling below u through round-off
        active = active & (u > cdf) & (pmf > 0.0)
    return k if k.ndim else float(k)


def sample_poisson(lam, rng, size=None):
    if np.any(np.asarray(lam) < 0.0):
        raise ValueError("poisson rate must be nonnegative")
    u = _gen(rng).uniform(0.0, 1.0, size if size is not None else np.shape(lam) or None)
    out = poisson_inverse(lam, u)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def sample_bernoulli(p, rng, size=None):
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0.0) | (p_arr > 1.0)):
        raise ValueError("bernoulli probability must lie in [0, 1]")
    u = _gen(rng).uniform(0.0, 1.0, size if size is not None else p_arr.shape or None)
    out = (u < p_arr).astype(np.int64)
    return int(out) if out.ndim == 0 else out
