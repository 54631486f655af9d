import math

import numpy as np
import pytest
from scipy.optimize import minimize
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from banditlab.env import EnvConfig, get_family, run_trajectories
from banditlab.estimators import (
    AdaptiveGLM,
    AdaptiveLeastSquares,
    NonConvergence,
    SelfNormalizedRidge,
    SingularDesign,
    WDecorrelatedLeastSquares,
    aw_least_squares,
    aw_mle_glm,
    design_matrix,
    ridge_estimator,
    select_lambda_T,
    sqrt_importance_weight,
    w_decorrelated,
)
from banditlab.policies import make_policy
from banditlab.statfn import make_stream


def _logged(family="t5", T=300, seed=0, n=1):
    cfg = EnvConfig(family=family)
    rngs = [make_stream(seed, "est", i) for i in range(n)]
    return run_trajectories(cfg, make_policy("ts", 3, n=n), T, rngs)


def _random_instance(seed, T=50, d=4):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.ones(T), rng.uniform(0, 5, (T, d - 1))])
    r = Z @ rng.normal(size=d) + rng.standard_t(5, T)
    w = rng.uniform(0.7, 7.0, T)
    return Z, r, w


class TestWeights:
    def test_examples(self):
        assert sqrt_importance_weight(0.5, 0.5) == 1.0
        assert sqrt_importance_weight(0.5, 0.125) == pytest.approx(2.0)
        assert sqrt_importance_weight(0.5, 0.25) * math.sqrt(2) == pytest.approx(1 / math.sqrt(0.25) * 1.0)

    @pytest.mark.parametrize("args", [(0.0, 0.5), (0.5, 0.0), (0.5, 1.2), (-0.1, 0.3)])
    def test_domain(self, args):
        with pytest.raises(ValueError):
            sqrt_importance_weight(*args)

    def test_design_matrix(self):
        Z = design_matrix([[1.0, 2.0], [1.0, 3.0]], [0, 1])
        assert np.array_equal(Z, [[1, 2, 0, 0], [1, 3, 1, 3]])


class TestLeastSquares:
    def test_unit_weights_is_textbook_ols(self):
        Z, r, _ = _random_instance(1)
        ref = np.linalg.lstsq(Z, r, rcond=None)[0]
        assert np.max(np.abs(aw_least_squares(Z, r).theta_hat - ref)) < 1e-12

    def test_scalar_mean(self):
        rep = aw_least_squares(np.ones((2, 1)), [1.0, 3.0], [1.0, 1.0])
        assert rep.theta_hat[0] == pytest.approx(2.0)
        assert rep.sigma2_hat == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_minimizer(self, seed):
        Z, r, w = _random_instance(seed)

        def loss(th):
            e = r - Z @ th
            return 0.5 * np.sum(w * e * e)

        def grad(th):
            return -Z.T @ (w * (r - Z @ th))

        res = minimize(loss, np.zeros(Z.shape[1]), jac=grad, method="BFGS",
                       options={"gtol": 1e-11, "maxiter": 10000})
        assert np.max(np.abs(aw_least_squares(Z, r, w).theta_hat - res.x)) <= 1e-6

    def test_meat_is_sigma2_times_inverse_propensity_gram(self):
        batch = _logged()
        Z, r, prop = batch.design[0], batch.rewards_raw[0], batch.propensity[0]
        rep = aw_least_squares(Z, r, 1 / np.sqrt(prop))
        a, p1 = batch.actions[0], batch.prob_arm1[0]
        ipw = np.where(a == 1, 1 / p1, 1 / (1 - p1))
        ref = rep.sigma2_hat * (Z * ipw[:, None]).T @ Z / len(r)
        assert np.allclose(rep.meat, ref, rtol=1e-12)

    def test_singular_design(self):
        Z = np.column_stack([np.ones(5), np.zeros(5)])
        with pytest.raises(SingularDesign):
            aw_least_squares(Z, np.arange(5.0))

    @pytest.mark.parametrize("c", [0.5, 2.0, 17.0])
    def test_global_weight_scale_invariance(self, c):
        Z, r, w = _random_instance(3)
        a, b = aw_least_squares(Z, r, w), aw_least_squares(Z, r, c * w)
        assert np.max(np.abs(a.theta_hat - b.theta_hat)) <= 1e-9
        assert np.allclose(a.sandwich(), b.sandwich(), rtol=1e-9, atol=0)


class TestGlm:
    def test_gaussian_equals_least_squares(self):
        Z, r, w = _random_instance(4)
        ls = aw_least_squares(Z, r, w)
        ml = aw_mle_glm(Z, r, "normal", w)
        assert np.max(np.abs(ml.theta_hat - ls.theta_hat)) <= 1e-10
        assert ml.iterations == 1

    def test_bernoulli_closed_form(self):
        rep = aw_mle_glm(np.ones((4, 1)), [1.0, 1.0, 0.0, 1.0], "bernoulli")
        assert rep.theta_hat[0] == pytest.approx(math.log(3.0), abs=1e-10)

    def test_separation(self):
        with pytest.raises(NonConvergence):
            aw_mle_glm(np.ones((1, 1)), [1.0], "bernoulli")

    @pytest.mark.parametrize("family", ["bernoulli", "poisson"])
    def test_score_root_and_likelihood_gradient(self, family):
        batch = _logged(family, T=400, seed=2)
        Z, r, prop = batch.design[0], batch.rewards_raw[0], batch.propensity[0]
        w = np.sqrt(0.5 / prop)
        fam = get_family(family)
        rep = aw_mle_glm(Z, r, fam, w)

        def nll(th):
            eta = Z @ th
            return np.sum(w * (fam.b(eta) - r * eta))

        h = 1e-6
        fd = np.array([(nll(rep.theta_hat + h * e) - nll(rep.theta_hat - h * e)) / (2 * h)
                       for e in np.eye(6)])
        assert np.max(np.abs(fd)) <= 1e-6 * max(1.0, np.sum(w))
        res = minimize(nll, np.zeros(6), method="BFGS", options={"gtol": 1e-10})
        assert np.max(np.abs(res.x - rep.theta_hat)) < 1e-4

    def test_glm_sandwich_pieces(self):
        batch = _logged("poisson", T=300, seed=5)
        Z, r, prop = batch.design[0], batch.rewards_raw[0], batch.propensity[0]
        w = 1 / np.sqrt(prop)
        rep = aw_mle_glm(Z, r, "poisson", w)
        b2 = np.exp(Z @ rep.theta_hat)
        assert np.allclose(rep.bread, (Z * (w * b2)[:, None]).T @ Z / 300, rtol=1e-12)
        assert np.allclose(rep.meat, (Z * (b2 / prop)[:, None]).T @ Z / 300, rtol=1e-12)

    def test_weight_scale_invariance(self):
        batch = _logged("bernoulli", T=300, seed=1)
        Z, r, prop = batch.design[0], batch.rewards_raw[0], batch.propensity[0]
        a = aw_mle_glm(Z, r, "bernoulli", 1 / np.sqrt(prop))
        b = aw_mle_glm(Z, r, "bernoulli", np.sqrt(0.5 / prop))
        assert np.max(np.abs(a.theta_hat - b.theta_hat)) <= 1e-9


class TestWDecorrelated:
    def test_hand_recursion(self):
        # w1 = 1/2, w2 = (1 - 1/2 * 1) * 2 / 5 = 0.2, w3 = (0.5 - 0.2 * 2) / 2 = 0.05
        Z = np.array([[1.0], [2.0], [1.0]])
        r = np.array([1.0, 0.0, 2.0])
        theta_ls = np.array([0.5])
        theta_d, V = w_decorrelated(Z, r, 1.0, theta_ls, 2.0)
        assert theta_d[0] == pytest.approx(0.625, abs=1e-12)
        assert V[0, 0] == pytest.approx(2.0 * 0.2925, abs=1e-12)

    def test_first_weight(self):
        z = np.array([[1.0, 2.0, 0.5]])
        theta_d, V = w_decorrelated(z, [1.0], 3.0, np.zeros(3), 1.0)
        w1 = z[0] / (3.0 + z[0] @ z[0])
        assert np.allclose(theta_d, w1 * 1.0, atol=1e-15)
        assert np.allclose(V, np.outer(w1, w1), atol=1e-15)

    def test_large_lambda_limit(self):
        Z, r, _ = _random_instance(6)
        ls = aw_least_squares(Z, r)
        theta_d, V = w_decorrelated(Z, r, 1e12, ls.theta_hat, ls.sigma2_hat)
        assert np.max(np.abs(theta_d - ls.theta_hat)) < 1e-9
        assert np.max(np.abs(V)) < 1e-18

    def test_batched_matches_single(self):
        batch = _logged(T=60, n=3)
        Z, r = batch.design, batch.rewards_raw
        th = np.stack([aw_least_squares(Z[i], r[i]).theta_hat for i in range(3)])
        s2 = np.array([1.0, 2.0, 0.5])
        td, V = w_decorrelated(Z, r, 0.7, th, s2)
        for i in range(3):
            a, b = w_decorrelated(Z[i], r[i], 0.7, th[i], s2[i])
            assert np.allclose(td[i], a, rtol=0, atol=1e-12) and np.allclose(V[i], b, atol=1e-12)

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            w_decorrelated(np.ones((2, 1)), [1.0, 1.0], 0.0, [1.0], 1.0)


class TestLambdaSelection:
    def test_examples(self):
        assert select_lambda_T([4.0] * 30, 1000) == pytest.approx(4.0 / math.log(1000))
        assert select_lambda_T(np.arange(1, 101), math.e ** 2) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            select_lambda_T([1.0], 2)
        with pytest.raises(ValueError):
            select_lambda_T([], 100)

    def test_pilot_value_is_positive_and_finite(self):
        from banditlab.estimators import gram_min_eigenvalue

        batch = _logged(T=1000, n=200, seed=11)
        lam = select_lambda_T(gram_min_eigenvalue(batch.design), 1000)
        assert 0 < lam < np.inf


class TestRidge:
    def test_examples(self):
        th, V = ridge_estimator(np.zeros((0, 3)), np.zeros(0), 2.0)
        assert np.array_equal(th, np.zeros(3)) and np.array_equal(V, 2 * np.eye(3))
        th, V = ridge_estimator([[2.0]], [6.0], 1.0)
        assert th[0] == pytest.approx(12 / 5)
        Z, r, _ = _random_instance(8)
        th, _ = ridge_estimator(Z, r, 1e-10)
        assert np.allclose(th, np.linalg.lstsq(Z, r, rcond=None)[0], atol=1e-6)


def test_awa_equivalence_in_multi_armed_case():
    cfg = EnvConfig(family="normal", theta_star=(0.0, 0.3), context_dim=0)
    b = run_trajectories(cfg, make_policy("ts", 1, n=1), 500, [make_stream(0, "awa")])
    a, r, prop = b.actions[0], b.rewards_raw[0], b.propensity[0]
    w = 1 / np.sqrt(prop)
    Z = np.column_stack([1 - a, a]).astype(float)
    theta = aw_least_squares(Z, r, w).theta_hat
    for k in (0, 1):
        m = a == k
        awa = np.sum(w[m] * r[m]) / np.sum(w[m])
        assert theta[k] == pytest.approx(awa, rel=1e-12, abs=1e-15)


class TestSklearnApi:
    def test_params_and_clone(self):
        est = AdaptiveGLM(family="poisson", max_iter=50)
        assert est.get_params() == {"family": "poisson", "weighting": "sqrt_ipw", "max_iter": 50,
                                    "tol": 1e-10}
        assert clone(est).get_params() == est.get_params()
        assert AdaptiveLeastSquares().set_params(weighting="none").weighting == "none"

    def test_fit_predict_regions(self):
        batch = _logged(T=400)
        Z, r, prop = batch.design[0], batch.rewards_raw[0], batch.propensity[0]
        est = AdaptiveLeastSquares().fit(Z, r, propensity=prop)
        assert np.allclose(est.predict(Z), Z @ est.coef_)
        assert est.confidence_region(0.1).contains(est.coef_)
        assert est.advantage_region(0.1).dim == 3
        ols = AdaptiveLeastSquares(weighting="none").fit(Z, r)
        assert np.allclose(ols.coef_, aw_least_squares(Z, r).theta_hat)
        assert WDecorrelatedLeastSquares(lambda_T=2.0).fit(Z, r).confidence_region().dim == 6
        assert SelfNormalizedRidge().fit(Z, r).confidence_region().radius > 6.0

    def test_validation(self):
        with pytest.raises(NotFittedError):
            AdaptiveLeastSquares().predict(np.ones((2, 2)))
        with pytest.raises(ValueError):
            AdaptiveLeastSquares().fit(np.ones((3, 2)), np.ones(3))  # no propensity
        with pytest.raises(ValueError):
            AdaptiveLeastSquares().fit(np.ones((3, 2)), np.ones(4), propensity=np.ones(3))
        with pytest.raises(ValueError):
            AdaptiveLeastSquares(weighting="bogus").fit(np.eye(2), np.ones(2), propensity=np.ones(2))
        with pytest.raises(ValueError):
            AdaptiveLeastSquares(weighting="none").fit([[np.nan, 1.0], [1.0, 2.0]], [1.0, 2.0])
