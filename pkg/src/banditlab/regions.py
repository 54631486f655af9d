"""Confidence regions: ellipsoids, norm balls, projections and volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import EstimatorReport
from .statfn import f_quantile, logdet_spd, solve_spd

__all__ = [
    "Ellipsoid",
    "NormBall",
    "hotelling_cutoff",
    "hotelling_region",
    "block_normal_region",
    "advantage_region",
    "project_ellipsoid",
    "self_normalized_region",
    "wdecorrelated_region",
    "wdecorrelated_advantage_region",
    "contains",
    "ellipsoid_volume",
    "calibrate_cutoff",
]


def _sym(m):
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class Ellipsoid:
    """``{theta : (center - theta)' shape (center - theta) <= cutoff}``."""

    center: np.ndarray
    shape: np.ndarray
    cutoff: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        shape = np.atleast_2d(np.asarray(self.shape, dtype=float))
        if shape.shape != (center.size, center.size):
            raise ValueError(f"shape matrix {shape.shape} does not match center of length {center.size}")
        if not self.cutoff > 0.0:
            raise ValueError("cutoff must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", _sym(shape))
        object.__setattr__(self, "cutoff", float(self.cutoff))

    @property
    def dim(self) -> int:
        return self.center.size

    def statistic(self, theta) -> float:
        diff = self.center - _vector(theta, self.dim)
        return float(diff @ self.shape @ diff)

    def normalized_statistic(self, theta) -> float:
        """Statistic divided by the cutoff; the region is where this is <= 1."""
        return self.statistic(theta) / self.cutoff

    def contains(self, theta) -> bool:
        return self.statistic(theta) <= self.cutoff

    def volume(self) -> float:
        return ellipsoid_volume(self)

    def rescaled(self, factor: float) -> "Ellipsoid":
        """Same ellipsoid with its cutoff multiplied by ``factor``."""
        return Ellipsoid(self.center, self.shape, self.cutoff * factor)


@dataclass(frozen=True)
class NormBall:
    """``{theta : ||center - theta||_metric <= radius}``.

    ``clamped`` records that the log term of the radius was negative and has
    been clamped to zero.
    """

    center: np.ndarray
    metric: np.ndarray
    radius: float
    clamped: bool = False

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        object.__setattr__(self, "metric", _sym(np.atleast_2d(np.asarray(self.metric, dtype=float))))

    @property
    def dim(self) -> int:
        return self.center.size

    def statistic(self, theta) -> float:
        diff = self.center - _vector(theta, self.dim)
        return math.sqrt(max(0.0, float(diff @ self.metric @ diff)))

    def normalized_statistic(self, theta) -> float:
        return (self.statistic(theta) / self.radius) ** 2

    def contains(self, theta) -> bool:
        return self.statistic(theta) <= self.radius

    def to_ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(self.center, self.metric, self.radius ** 2)

    def volume(self) -> float:
        return ellipsoid_volume(self.to_ellipsoid())


def _vector(theta, d):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (d,):
        raise ValueError(f"expected a vector of length {d}, got shape {theta.shape}")
    return theta


def hotelling_cutoff(d: int, T: int, alpha: float) -> float:
    """``d (T - 1) / (T - d) * F_{d, T-d}(1 - alpha)``."""
    if T <= d:
        raise ValueError(f"need T > d, got T={T}, d={d}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return d * (T - 1) / (T - d) * f_quantile(d, T - d, 1.0 - alpha)


def hotelling_region(report: EstimatorReport, alpha: float) -> Ellipsoid:
    """Joint region ``T (th - theta)' B M^{-1} B (th - theta) <= cutoff``."""
    T, d = report.T, report.d
    if T <= d:
        raise ValueError(f"need T > d, got T={T}, d={d}")
    bread = report.bread
    Q = T * bread.T @ solve_spd(report.meat, bread)
    return Ellipsoid(report.theta_hat, Q, hotelling_cutoff(d, T, alpha))


def block_normal_region(report: EstimatorReport, alpha: float, p: int) -> Ellipsoid:
    """Region for the last ``p`` coordinates from the sandwich covariance sub-block."""
    T = report.T
    block = report.sandwich()[-p:, -p:]
    Q = T * solve_spd(block, np.eye(p))
    return Ellipsoid(report.theta_hat[-p:], Q, hotelling_cutoff(p, T, alpha))


def advantage_region(report: EstimatorReport, alpha: float, p: int, projected: bool) -> Ellipsoid:
    if projected:
        return project_ellipsoid(hotelling_region(report, alpha), p)
    return block_normal_region(report, alpha, p)


def project_ellipsoid(region: Ellipsoid, keep_last: int) -> Ellipsoid:
    """Shadow of ``region`` on its last ``keep_last`` coordinates.

    With ``B = shape / cutoff`` partitioned as ``[[C, D], [D', E]]`` the shadow
    is ``{z : (z0 - z)' (E - D' C^{-1} D) (z0 - z) <= 1}``.
    """
    d = region.dim
    p = int(keep_last)
    if not 1 <= p < d:
        raise ValueError(f"keep_last must satisfy 1 <= p < {d}, got {keep_last}")
    B = region.shape / region.cutoff
    q = d - p
    C, D, E = B[:q, :q], B[:q, q:], B[q:, q:]
    schur = E - D.T @ solve_spd(C, D)
    return Ellipsoid(region.center[q:], schur, 1.0)


def self_normalized_region(theta_ridge, V_T, alpha: float, lam: float = 1.0,
                           sigma: float = 1.0, S: float = 6.0) -> NormBall:
    """Ridge confidence ball with radius

        sigma * sqrt(2 log(det(V)^{1/2} det(lam I)^{-1/2} / alpha)) + sqrt(lam) S
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    V_T = np.asarray(V_T, dtype=float)
    d = V_T.shape[0]
    log_arg = 0.5 * logdet_spd(V_T) - 0.5 * d * math.log(lam) - math.log(alpha)
    clamped = log_arg < 0.0
    radius = sigma * math.sqrt(2.0 * max(log_arg, 0.0)) + math.sqrt(lam) * S
    return NormBall(np.asarray(theta_ridge, dtype=float), V_T, radius, clamped)


def wdecorrelated_region(theta_d, V, T: int, alpha: float) -> Ellipsoid:
    theta_d = np.asarray(theta_d, dtype=float)
    d = theta_d.size
    return Ellipsoid(theta_d, solve_spd(V, np.eye(d)), hotelling_cutoff(d, T, alpha))


def wdecorrelated_advantage_region(theta_d, V, T: int, alpha: float, p: int) -> Ellipsoid:
    theta_d = np.asarray(theta_d, dtype=float)
    block = np.asarray(V, dtype=float)[-p:, -p:]
    return Ellipsoid(theta_d[-p:], solve_spd(block, np.eye(p)), hotelling_cutoff(p, T, alpha))


def contains(region, theta) -> bool:
    return region.contains(theta)


def ellipsoid_volume(region) -> float:
    """Lebesgue volume ``pi^{d/2} / Gamma(d/2 + 1) * c^{d/2} * det(Q)^{-1/2}``."""
    if isinstance(region, NormBall):
        region = region.to_ellipsoid()
    d = region.dim
    log_vol = (0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d + 1.0)
               + 0.5 * d * math.log(region.cutoff) - 0.5 * logdet_spd(region.shape))
    return math.exp(log_vol)


def calibrate_cutoff(statistics, alpha: float) -> float:
    """Empirical ``1 - alpha`` quantile by nearest rank (ties resolved upward)."""
    s = np.sort(np.asarray(statistics, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("need at least one statistic")
    rank = max(1, math.ceil((1.0 - alpha) * s.size - 1e-9))
    return float(s[min(rank, s.size) - 1])
