import math

import numpy as np
import pytest
from scipy.stats import chi2

from banditlab.estimators import EstimatorReport, aw_least_squares
from banditlab.regions import (
    Ellipsoid,
    NormBall,
    calibrate_cutoff,
    contains,
    ellipsoid_volume,
    hotelling_cutoff,
    hotelling_region,
    project_ellipsoid,
    self_normalized_region,
)
from banditlab.statfn import f_quantile


def _random_spd(rng, d):
    B = rng.standard_normal((d, d))
    return B @ B.T + 0.1 * np.eye(d)


def _report(seed=0, T=200, d=4):
    rng = np.random.default_rng(seed)
    Z = np.column_stack([np.ones(T), rng.uniform(0, 5, (T, d - 1))])
    return aw_least_squares(Z, Z @ np.ones(d) + rng.normal(size=T), rng.uniform(1, 3, T))


class TestEllipsoid:
    def test_validation(self):
        with pytest.raises(ValueError):
            Ellipsoid(np.zeros(2), np.eye(3), 1.0)
        with pytest.raises(ValueError):
            Ellipsoid(np.zeros(2), np.eye(2), 0.0)

    def test_boundary_is_closed(self):
        e = Ellipsoid([1.0, -1.0], np.diag([4.0, 1.0]), 4.0)
        assert contains(e, [1.0, -1.0])
        assert e.contains([2.0, -1.0])  # 4 * 1^2 = cutoff exactly
        assert not e.contains([2.0 + 1e-9, -1.0])
        with pytest.raises(ValueError):
            e.contains([1.0, 2.0, 3.0])

    def test_rescaled(self):
        e = Ellipsoid([0.0], [[1.0]], 2.0).rescaled(3.0)
        assert e.cutoff == 6.0


class TestHotelling:
    def test_cutoff_formula(self):
        assert hotelling_cutoff(6, 1000, 0.1) == pytest.approx(6 * 999 / 994 * f_quantile(6, 994, 0.9),
                                                                rel=1e-15)
        with pytest.raises(ValueError):
            hotelling_cutoff(6, 6, 0.1)

    def test_contains_center_and_quadratic_growth(self):
        rep = _report()
        e = hotelling_region(rep, 0.1)
        assert e.contains(rep.theta_hat)
        e1 = np.eye(rep.d)[0]
        s1 = e.statistic(rep.theta_hat + 1e-2 * e1)
        s2 = e.statistic(rep.theta_hat + 2e-2 * e1)
        assert s2 / s1 == pytest.approx(4.0, rel=1e-6)

    def test_shape_is_T_bread_meatinv_bread(self):
        rep = _report(1)
        e = hotelling_region(rep, 0.1)
        ref = rep.T * rep.bread @ np.linalg.inv(rep.meat) @ rep.bread
        assert np.allclose(e.shape, ref, rtol=1e-10)

    def test_too_few_rows(self):
        rep = EstimatorReport(np.zeros(3), np.eye(3), np.eye(3), T=3)
        with pytest.raises(ValueError):
            hotelling_region(rep, 0.1)

    def test_weight_scale_invariance_of_statistic(self):
        rng = np.random.default_rng(5)
        T = 300
        Z = np.column_stack([np.ones(T), rng.uniform(0, 5, T)])
        r = Z @ [0.2, 0.1] + rng.standard_t(5, T)
        w = rng.uniform(0.7, 7.0, T)
        theta = np.array([0.2, 0.1])
        base = hotelling_region(aw_least_squares(Z, r, w), 0.1).statistic(theta)
        for c in (0.5, 2.0):
            s = hotelling_region(aw_least_squares(Z, r, c * w), 0.1).statistic(theta)
            assert abs(s - base) <= 1e-9 * max(1.0, base)


class TestProjection:
    def test_block_diagonal(self):
        Q = np.diag([1.0, 2.0, 3.0])
        p = project_ellipsoid(Ellipsoid(np.zeros(3), Q, 2.0), 2)
        assert np.allclose(p.shape, np.diag([1.0, 1.5]), atol=0)
        assert p.cutoff == 1.0

    def test_axis_aligned_half_width(self):
        c = 3.0
        p = project_ellipsoid(Ellipsoid([5.0, 7.0], np.diag([1.0, 4.0]), c), 1)
        assert p.center[0] == 7.0
        half = 1.0 / math.sqrt(p.shape[0, 0])
        assert half == pytest.approx(math.sqrt(c) / 2.0, rel=1e-15)

    def test_keep_last_range(self):
        e = Ellipsoid(np.zeros(3), np.eye(3), 1.0)
        for bad in (0, 3):
            with pytest.raises(ValueError):
                project_ellipsoid(e, bad)

    def test_schur_against_inverse_block(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            d = int(rng.integers(2, 9))
            p = int(rng.integers(1, d))
            Q = _random_spd(rng, d)
            c = float(rng.uniform(0.5, 20))
            proj = project_ellipsoid(Ellipsoid(rng.normal(size=d), Q, c), p)
            block = np.linalg.inv(Q / c)[-p:, -p:]
            assert np.max(np.abs(np.linalg.inv(proj.shape) - block)) <= 1e-9 * max(1.0, np.max(np.abs(block)))

    def test_soundness_on_interior_points(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            d, p = 5, 2
            Q = _random_spd(rng, d)
            center = rng.normal(size=d)
            e = Ellipsoid(center, Q, 2.0)
            proj = project_ellipsoid(e, p)
            L = np.linalg.cholesky(np.linalg.inv(Q / 2.0))
            u = rng.normal(size=(1000, d))
            u *= (rng.uniform(size=(1000, 1)) ** (1 / d)) / np.linalg.norm(u, axis=1, keepdims=True)
            pts = center + u @ L.T
            for x in pts:
                assert e.contains(x)
                assert proj.statistic(x[-p:]) <= proj.cutoff * (1 + 1e-12)

    def test_tightness_via_support_function(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            d, p = 4, 2
            Q = _random_spd(rng, d)
            c = 1.7
            proj = project_ellipsoid(Ellipsoid(np.zeros(d), Q, c), p)
            w, V = np.linalg.eigh(Q / c)
            Binv = V @ np.diag(1 / w) @ V.T  # support h(u) = sqrt(u' B^{-1} u)
            for j in range(p):
                u_full = np.zeros(d)
                u_full[d - p + j] = 1.0
                full = math.sqrt(u_full @ Binv @ u_full)
                u = np.zeros(p)
                u[j] = 1.0
                pr = math.sqrt(u @ np.linalg.inv(proj.shape) @ u)
                assert abs(full - pr) <= 1e-8


class TestVolume:
    def test_examples(self):
        assert ellipsoid_volume(Ellipsoid([0.0], [[1.0]], 1.0)) == pytest.approx(2.0, rel=1e-15)
        r = 1.7
        assert Ellipsoid(np.zeros(2), np.eye(2), r * r).volume() == pytest.approx(math.pi * r * r, rel=1e-14)

    @pytest.mark.parametrize("d", [2, 3])
    def test_rejection_sampling_oracle(self, d):
        rng = np.random.default_rng(20 + d)
        Q = _random_spd(rng, d)
        c = 1.3
        e = Ellipsoid(np.zeros(d), Q, c)
        half = np.sqrt(np.diag(np.linalg.inv(Q / c)))  # bounding box half-widths
        n = 10 ** 6
        pts = rng.uniform(-half, half, size=(n, d))
        inside = np.einsum("ij,jk,ik->i", pts, Q, pts) <= c
        mc = inside.mean() * np.prod(2 * half)
        assert e.volume() == pytest.approx(mc, rel=0.01)

    def test_normball_volume_via_ellipsoid(self):
        V = np.array([[2.0, 0.3], [0.3, 1.0]])
        b = NormBall(np.zeros(2), V, 2.5)
        assert b.volume() == pytest.approx(Ellipsoid(np.zeros(2), V, 6.25).volume(), rel=1e-15)


class TestSelfNormalized:
    def test_identity_radius(self):
        b = self_normalized_region(np.zeros(3), np.eye(3), 0.1)
        assert b.radius == pytest.approx(math.sqrt(2 * math.log(10)) + 6, abs=1e-12)
        assert b.radius == pytest.approx(8.1460, abs=1e-4)
        assert not b.clamped

    def test_radius_monotone_in_determinant(self):
        radii = [self_normalized_region(np.zeros(2), s * np.eye(2), 0.1).radius for s in (1, 2, 10, 1e4)]
        assert all(a <= b for a, b in zip(radii, radii[1:]))

    def test_clamped_when_log_argument_negative(self):
        b = self_normalized_region(np.zeros(2), 0.01 * np.eye(2), 0.5)
        assert b.clamped and b.radius == pytest.approx(6.0)

    def test_membership_is_norm_test(self):
        b = self_normalized_region(np.zeros(2), np.diag([4.0, 1.0]), 0.1)
        edge = np.array([b.radius / 2.0, 0.0])
        assert b.contains(edge) and not b.contains(edge * (1 + 1e-9))
        assert b.normalized_statistic(edge) == pytest.approx(1.0)


class TestCalibration:
    def test_examples(self):
        assert calibrate_cutoff([5.0] * 20, 0.1) == 5.0
        assert calibrate_cutoff(np.arange(1, 101), 0.1) == 90.0
        with pytest.raises(ValueError):
            calibrate_cutoff([], 0.1)

    def test_chi2_sampling_oracle(self):
        x = chi2.rvs(6, size=10 ** 4, random_state=np.random.default_rng(0))
        assert calibrate_cutoff(x, 0.1) == pytest.approx(chi2.ppf(0.9, 6), rel=0.03)

    def test_coverage_at_least_nominal(self):
        rng = np.random.default_rng(1)
        for n in (10, 37, 1000):
            x = rng.exponential(size=n)
            assert np.mean(x <= calibrate_cutoff(x, 0.1)) >= 0.9
