"""Point estimators for logged bandit data.

The functional core works on a design matrix ``Z`` (rows ``[x, a * x]``),
raw rewards and per-row weights. Adaptive weighting uses square-root
importance weights ``W_t = sqrt(pi_eval / pi_logged)`` of the logged action;
``W_t = 1`` recovers the ordinary estimators.

Sandwich pieces are reported on the per-observation scale::

    bread = (1/T) sum W_t b''(Z_t' theta) Z_t Z_t'
    meat  = (1/T) sum W_t^2 b''(Z_t' theta) Z_t Z_t'     (times sigma2 for LS)

With ``W_t = 1 / sqrt(pi_t)`` the meat weight ``W_t^2`` is exactly
``(1/pi)^A (1/(1-pi))^(1-A)``, and rescaling every weight by a constant
leaves ``bread @ inv(meat) @ bread`` unchanged.

Estimator classes follow the scikit-learn conventions (``fit`` returns
``self``, learned state ends in an underscore, ``get_params`` works).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .env import get_family
from .statfn import NotPositiveDefinite, solve_spd

__all__ = [
    "SingularDesign",
    "SingularHessian",
    "NonConvergence",
    "EstimatorReport",
    "sqrt_importance_weight",
    "design_matrix",
    "aw_least_squares",
    "aw_mle_glm",
    "w_decorrelated",
    "gram_min_eigenvalue",
    "select_lambda_T",
    "ridge_estimator",
    "AdaptiveLeastSquares",
    "AdaptiveGLM",
    "WDecorrelatedLeastSquares",
    "SelfNormalizedRidge",
]


class SingularDesign(np.linalg.LinAlgError):
    """Weighted Gram matrix is not positive definite."""


class SingularHessian(np.linalg.LinAlgError):
    """Newton Jacobian lost positive definiteness."""


class NonConvergence(RuntimeError):
    """Newton-Raphson did not reach the score tolerance."""


@dataclass
class EstimatorReport:
    """Point estimate together with its sandwich pieces."""

    theta_hat: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    T: int
    sigma2_hat: float | None = None
    converged: bool = True
    iterations: int = 0

    @property
    def d(self) -> int:
        return self.theta_hat.shape[0]

    def sandwich(self) -> np.ndarray:
        """Asymptotic covariance of ``sqrt(T) (theta_hat - theta)``."""
        inv_bread_meat = solve_spd(self.bread, self.meat)
        return solve_spd(self.bread, inv_bread_meat.T)


def sqrt_importance_weight(pi_eval, pi_logged):
    """Square-root importance weight ``sqrt(pi_eval / pi_logged)``."""
    pe = np.asarray(pi_eval, dtype=float)
    pl = np.asarray(pi_logged, dtype=float)
    if np.any(pe <= 0.0) or np.any(pl <= 0.0) or np.any(pe > 1.0) or np.any(pl > 1.0):
        raise ValueError("probabilities must lie in (0, 1]")
    w = np.sqrt(pe / pl)
    return float(w) if w.ndim == 0 else w


def design_matrix(contexts, actions) -> np.ndarray:
    x = np.asarray(contexts, dtype=float)
    a = np.asarray(actions, dtype=float)
    return np.concatenate([x, a[..., None] * x], axis=-1)


_BOUNDARY_CURVATURE = 1e-14


def _weights(weights, T):
    if weights is None:
        return np.ones(T)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (T,))
    if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    return w


def _gram(Z, w):
    return (Z * w[:, None]).T @ Z


def aw_least_squares(Z, rewards, weights=None) -> EstimatorReport:
    """Weighted least squares with the homoskedastic sandwich pieces.

    ``sigma2_hat`` is the unweighted mean squared residual.

    Raises
    ------
    SingularDesign
        When the weighted Gram matrix fails its Cholesky factorization.
    """
    Z = np.asarray(Z, dtype=float)
    r = np.asarray(rewards, dtype=float)
    T = Z.shape[0]
    w = _weights(weights, T)
    gram = _gram(Z, w)
    try:
        theta = solve_spd(gram, Z.T @ (w * r))
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"weighted Gram matrix is singular: {exc}") from None
    resid = r - Z @ theta
    sigma2 = float(np.mean(resid ** 2))
    meat = sigma2 * _gram(Z, w * w) / T
    return EstimatorReport(theta_hat=theta, bread=gram / T, meat=meat, T=T,
                           sigma2_hat=sigma2, converged=True, iterations=0)


def aw_mle_glm(Z, rewards, family, weights=None, init=None, max_iter: int = 100,
               tol: float = 1e-10) -> EstimatorReport:
    """Root of the weighted GLM score ``sum W_t (R_t - b'(Z_t' theta)) Z_t``.

    Newton-Raphson from ``init`` (zeros by default) with the weighted
    Jacobian ``-sum W_t b''(Z_t' theta) Z_t Z_t'``. A full step whose score
    norm is larger than the current one is halved, at most 30 times.
    Convergence needs the score max-norm at or below ``tol`` (never tighter
    than the rounding floor of the score sum) *and* a negligible Newton step;
    the second condition is what catches separation, where the score decays
    while the coefficients run off to infinity.

    Raises
    ------
    NonConvergence
        After ``max_iter`` Newton updates, when step-halving fails, or when
        some ``b''(Z_t' theta)`` underflows (separated data).
    SingularHessian
        When the Jacobian is not positive definite along the path.
    """
    family = get_family(family)
    Z = np.asarray(Z, dtype=float)
    r = np.asarray(rewards, dtype=float)
    T, d = Z.shape
    w = _weights(weights, T)
    theta = np.zeros(d) if init is None else np.array(init, dtype=float)

    def score_of(th):
        eta = Z @ th
        terms = (w * (r - family.b1(eta)))[:, None] * Z
        return terms.sum(axis=0), np.abs(terms).sum(axis=0)

    score, mag = score_of(theta)
    for it in range(max_iter + 1):
        eta = Z @ theta
        hess = _gram(Z, w * family.b2(eta))
        try:
            step = solve_spd(hess, score)
        except NotPositiveDefinite as exc:
            raise SingularHessian(str(exc)) from None
        norm = np.max(np.abs(score))
        floor = 64.0 * np.finfo(float).eps * np.max(mag)
        if np.min(family.b2(eta)) < _BOUNDARY_CURVATURE:
            # fitted means on the edge of the mean space in floating point: separated data
            raise NonConvergence("fitted means reached the boundary; the data are separated")
        if norm <= max(tol, floor) and np.max(np.abs(step)) <= 1e-8 * (1.0 + np.max(np.abs(theta))):
            bread = hess / T
            meat = _gram(Z, w * w * family.b2(eta)) / T
            return EstimatorReport(theta_hat=theta, bread=bread, meat=meat, T=T,
                                   converged=True, iterations=it)
        if it == max_iter:
            break
        for _ in range(31):
            cand = theta + step
            cand_score, cand_mag = score_of(cand)
            cand_norm = np.max(np.abs(cand_score))
            if np.all(np.isfinite(cand_score)) and (cand_norm <= norm or norm <= tol):
                break
            step = 0.5 * step
        else:
            raise NonConvergence("step-halving failed to reduce the score")
        theta, score, mag = cand, cand_score, cand_mag
    raise NonConvergence(f"no convergence after {max_iter} Newton iterations")


def w_decorrelated(Z, rewards, lambda_T: float, theta_ls, sigma2_hat):
    """W-decorrelated least squares correction.

    Vector weights follow the sequential recursion

        w_t = (I - sum_{s<t} w_s Z_s') Z_t / (lambda_T + |Z_t|^2)

    and the estimate is ``theta_ls + sum_t w_t (R_t - Z_t' theta_ls)`` with
    covariance ``sigma2_hat * sum_t w_t w_t'``. Leading batch axes on every
    argument are supported (``Z`` of shape ``(..., T, d)``).
    """
    if not lambda_T > 0.0:
        raise ValueError("lambda_T must be positive")
    Z = np.asarray(Z, dtype=float)
    r = np.asarray(rewards, dtype=float)
    theta_ls = np.asarray(theta_ls, dtype=float)
    *batch, T, d = Z.shape
    if r.shape != (*batch, T) or theta_ls.shape != (*batch, d):
        raise ValueError("dimension mismatch between Z, rewards and theta_ls")
    resid = r - np.einsum("...td,...d->...t", Z, theta_ls)
    M = np.broadcast_to(np.eye(d), (*batch, d, d)).copy()
    correction = np.zeros((*batch, d))
    outer = np.zeros((*batch, d, d))
    for t in range(T):
        z = Z[..., t, :]
        wt = np.einsum("...ij,...j->...i", M, z) / (lambda_T + np.sum(z * z, axis=-1))[..., None]
        M -= wt[..., :, None] * z[..., None, :]
        correction += wt * resid[..., t, None]
        outer += wt[..., :, None] * wt[..., None, :]
    V = np.asarray(sigma2_hat, dtype=float)[..., None, None] * outer
    return theta_ls + correction, V


def gram_min_eigenvalue(Z) -> float:
    Z = np.asarray(Z, dtype=float)
    return float(np.linalg.eigvalsh(Z.swapaxes(-1, -2) @ Z)[..., 0]) if Z.ndim == 2 \
        else np.linalg.eigvalsh(Z.swapaxes(-1, -2) @ Z)[..., 0]


def select_lambda_T(pilot_min_eigs, T: int) -> float:
    """1st percentile (nearest rank) of pilot Gram minimum eigenvalues over ``ln T``."""
    eigs = np.sort(np.asarray(pilot_min_eigs, dtype=float).ravel())
    if eigs.size == 0:
        raise ValueError("pilot list is empty")
    if T <= math.e:
        raise ValueError("T must exceed e so that log T > 1")
    rank = max(1, math.ceil(0.01 * eigs.size))
    return float(eigs[rank - 1] / math.log(T))


def ridge_estimator(Z, rewards, lam: float = 1.0):
    """Ridge estimate and its regularized Gram matrix ``V = lam I + Z'Z``."""
    if not lam > 0.0:
        raise ValueError("lam must be positive")
    Z = np.asarray(Z, dtype=float).reshape(-1, np.shape(Z)[-1])
    r = np.asarray(rewards, dtype=float).ravel()
    V = lam * np.eye(Z.shape[1]) + Z.T @ Z
    return solve_spd(V, Z.T @ r), V


# ---------------------------------------------------------------------------
# scikit-learn style wrappers


_WEIGHTINGS = ("sqrt_ipw", "none")


def _fit_weights(weighting, n, propensity, eval_propensity):
    if weighting not in _WEIGHTINGS:
        raise ValueError(f"weighting must be one of {_WEIGHTINGS}, got {weighting!r}")
    if weighting == "none":
        return np.ones(n)
    if propensity is None:
        raise ValueError("adaptive weighting needs the logged propensity of each action")
    propensity = check_array(propensity, ensure_2d=False)
    if propensity.shape != (n,):
        raise ValueError(f"propensity has shape {propensity.shape}, expected ({n},)")
    pe = np.broadcast_to(np.asarray(eval_propensity, dtype=float), (n,))
    return sqrt_importance_weight(pe, propensity)


class AdaptiveLeastSquares(RegressorMixin, BaseEstimator):
    """Least squares with optional square-root importance weights.

    Parameters
    ----------
    weighting : {"sqrt_ipw", "none"}
        ``"sqrt_ipw"`` weights row t by ``sqrt(eval_propensity / propensity)``;
        ``"none"`` is ordinary least squares.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    bread_, meat_ : ndarray of shape (n_features, n_features)
    sigma2_ : float
        Mean squared (unweighted) residual.
    report_ : EstimatorReport
    """

    def __init__(self, weighting="sqrt_ipw"):
        self.weighting = weighting

    def fit(self, X, y, propensity=None, eval_propensity=0.5):
        X, y = check_X_y(X, y, y_numeric=True)
        self.weights_ = _fit_weights(self.weighting, X.shape[0], propensity, eval_propensity)
        self.report_ = aw_least_squares(X, y, self.weights_)
        self.coef_ = self.report_.theta_hat
        self.bread_ = self.report_.bread
        self.meat_ = self.report_.meat
        self.sigma2_ = self.report_.sigma2_hat
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return X @ self.coef_

    def confidence_region(self, alpha=0.1):
        from .regions import hotelling_region

        check_is_fitted(self)
        return hotelling_region(self.report_, alpha)

    def advantage_region(self, alpha=0.1, n_advantage=None):
        """Region for the trailing ``n_advantage`` coefficients.

        Weighted fits project the joint ellipsoid; unweighted fits use the
        normal approximation on the covariance sub-block.
        """
        from .regions import advantage_region

        check_is_fitted(self)
        p = self.n_features_in_ // 2 if n_advantage is None else n_advantage
        return advantage_region(self.report_, alpha, p, projected=self.weighting != "none")


class AdaptiveGLM(RegressorMixin, BaseEstimator):
    """Generalized linear model fitted by (weighted) maximum likelihood.

    Parameters
    ----------
    family : {"bernoulli", "poisson", "normal", "t5"} or GlmFamily
    weighting : {"sqrt_ipw", "none"}
    max_iter : int
        Newton-Raphson iteration cap.
    tol : float
        Score max-norm tolerance.
    """

    def __init__(self, family="bernoulli", weighting="sqrt_ipw", max_iter=100, tol=1e-10):
        self.family = family
        self.weighting = weighting
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, propensity=None, eval_propensity=0.5, init=None):
        X, y = check_X_y(X, y, y_numeric=True)
        self.family_ = get_family(self.family)
        self.weights_ = _fit_weights(self.weighting, X.shape[0], propensity, eval_propensity)
        self.report_ = aw_mle_glm(X, y, self.family_, self.weights_, init=init,
                                  max_iter=self.max_iter, tol=self.tol)
        self.coef_ = self.report_.theta_hat
        self.bread_ = self.report_.bread
        self.meat_ = self.report_.meat
        self.n_iter_ = self.report_.iterations
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Fitted mean ``b'(X coef)``."""
        check_is_fitted(self)
        return self.family_.b1(check_array(X) @ self.coef_)

    def confidence_region(self, alpha=0.1):
        from .regions import hotelling_region

        check_is_fitted(self)
        return hotelling_region(self.report_, alpha)

    def advantage_region(self, alpha=0.1, n_advantage=None):
        from .regions import advantage_region

        check_is_fitted(self)
        p = self.n_features_in_ // 2 if n_advantage is None else n_advantage
        return advantage_region(self.report_, alpha, p, projected=self.weighting != "none")


class WDecorrelatedLeastSquares(RegressorMixin, BaseEstimator):
    """OLS corrected by sequentially built decorrelating weights.

    Rows of ``X`` must be in collection order.
    """

    def __init__(self, lambda_T=1.0):
        self.lambda_T = lambda_T

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.ols_ = aw_least_squares(X, y)
        self.coef_, self.covariance_ = w_decorrelated(
            X, y, self.lambda_T, self.ols_.theta_hat, self.ols_.sigma2_hat)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        return check_array(X) @ self.coef_

    def confidence_region(self, alpha=0.1):
        from .regions import wdecorrelated_region

        check_is_fitted(self)
        return wdecorrelated_region(self.coef_, self.covariance_, self.ols_.T, alpha)


class SelfNormalizedRidge(RegressorMixin, BaseEstimator):
    """Ridge regression with the self-normalized martingale confidence ball.

    ``sigma`` is the assumed sub-Gaussian scale of the noise and ``S`` a bound
    on the norm of the true parameter.
    """

    def __init__(self, lam=1.0, sigma=1.0, S=6.0):
        self.lam = lam
        self.sigma = sigma
        self.S = S

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.coef_, self.V_ = ridge_estimator(X, y, self.lam)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        return check_array(X) @ self.coef_

    def confidence_region(self, alpha=0.1):
        from .regions import self_normalized_region

        check_is_fitted(self)
        return self_normalized_region(self.coef_, self.V_, alpha, lam=self.lam,
                                      sigma=self.sigma, S=self.S)
