import math

import mpmath
import numpy as np
import pytest
from scipy.optimize import brentq

from duelcluster.glm import (
    MleConfig,
    PreferenceDataset,
    fit_mle,
    kappa_mu_bound,
    log_logistic,
    logistic,
    nll_gradient,
    nll_loss,
)


def random_dataset(rng, n, d, scale=1.0):
    deltas = rng.standard_normal((n, d))
    deltas *= scale / np.maximum(np.linalg.norm(deltas, axis=1, keepdims=True), 1.0)
    ys = rng.integers(0, 2, size=n).astype(float)
    return PreferenceDataset(deltas, ys, d)


class TestLogistic:
    def test_zero(self):
        assert logistic(0.0) == 0.5

    def test_ln3(self):
        assert logistic(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)

    def test_large_negative_no_underflow_to_nan(self):
        # high-precision value of 1/(1+e^{50})
        expected = float(1 / (1 + mpmath.e**50))
        got = logistic(-50.0)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got > 0.0

    def test_extreme_arguments_stay_finite(self):
        z = np.array([-1000.0, -100.0, 0.0, 100.0, 1000.0])
        out = logistic(z)
        assert np.all(np.isfinite(out))
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(-30, 30, size=1000)
        np.testing.assert_allclose(logistic(z) + logistic(-z), 1.0, atol=1e-12)

    def test_log_logistic_matches_log_of_logistic(self):
        z = np.linspace(-30, 30, 101)
        np.testing.assert_allclose(log_logistic(z), np.log(logistic(z)), atol=1e-12)


class TestNllLoss:
    def test_zero_theta_single_row(self):
        ds = PreferenceDataset(np.array([[1.0, 0.0]]), np.array([1.0]), 2)
        assert nll_loss(np.zeros(2), ds, 0.0) == pytest.approx(math.log(2.0))

    def test_zero_theta_many_rows_any_labels(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng, 17, 3)
        assert nll_loss(np.zeros(3), ds, 0.0) == pytest.approx(17 * math.log(2.0))

    def test_matches_high_precision_term_by_term(self):
        rng = np.random.default_rng(2)
        ds = random_dataset(rng, 5, 4)
        theta = rng.standard_normal(4)
        lam = 0.3
        with mpmath.workdps(50):
            total = mpmath.mpf(0)
            for delta, y in zip(ds.deltas, ds.ys):
                score = mpmath.mpf(0)
                for a, b in zip(theta, delta):
                    score += mpmath.mpf(a) * mpmath.mpf(b)
                mu = 1 / (1 + mpmath.e ** (-score))
                total -= y * mpmath.log(mu) + (1 - y) * mpmath.log(1 - mu)
            total += mpmath.mpf(lam) / 2 * sum(mpmath.mpf(v) ** 2 for v in theta)
            expected = float(total)
        assert nll_loss(theta, ds, lam) == pytest.approx(expected, rel=1e-12)

    def test_convexity_on_random_pairs(self):
        rng = np.random.default_rng(3)
        ds = random_dataset(rng, 12, 3)
        for _ in range(50):
            a = rng.standard_normal(3)
            b = rng.standard_normal(3)
            mid = nll_loss((a + b) / 2.0, ds, 0.2)
            assert mid <= (nll_loss(a, ds, 0.2) + nll_loss(b, ds, 0.2)) / 2.0 + 1e-9


class TestNllGradient:
    def test_empty_dataset_is_regularizer_only(self):
        ds = PreferenceDataset.empty(3)
        t = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(nll_gradient(t, ds, 0.7), 0.7 * t)

    def test_zero_theta_single_positive_row(self):
        delta = np.array([0.4, -0.3])
        ds = PreferenceDataset(delta[None, :], np.array([1.0]), 2)
        np.testing.assert_allclose(nll_gradient(np.zeros(2), ds, 0.0), -delta / 2.0)

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            d = int(rng.integers(1, 5))
            ds = random_dataset(rng, int(rng.integers(1, 20)), d)
            theta = rng.standard_normal(d)
            lam = float(rng.uniform(0.05, 2.0))
            grad = nll_gradient(theta, ds, lam)
            h = 1e-6
            fd = np.zeros(d)
            for k in range(d):
                e = np.zeros(d)
                e[k] = h
                fd[k] = (nll_loss(theta + e, ds, lam) - nll_loss(theta - e, ds, lam)) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


class TestFitMle:
    def test_empty_dataset_returns_zero(self):
        res = fit_mle(PreferenceDataset.empty(4), MleConfig(lam=0.5))
        np.testing.assert_array_equal(res.theta, np.zeros(4))
        assert res.converged

    def test_1d_matches_bisection_of_stationarity(self):
        # 8 wins and 2 losses on the same unit difference feature
        deltas = np.ones((10, 1))
        ys = np.array([1.0] * 8 + [0.0] * 2)
        ds = PreferenceDataset(deltas, ys, 1)
        lam = 0.1

        def scalar_grad(t):
            return float(nll_gradient(np.array([t]), ds, lam)[0])

        root = brentq(scalar_grad, -20.0, 20.0, xtol=1e-12)
        res = fit_mle(ds, MleConfig(lam=lam, tol=1e-10))
        assert res.converged
        assert res.theta[0] == pytest.approx(root, abs=1e-3)

    def test_2d_matches_grid_search(self):
        rng = np.random.default_rng(5)
        ds = random_dataset(rng, 20, 2)
        lam = 0.5
        # coarse grid at step 1e-2, refined at 1e-3 around the coarse minimum
        grid = np.arange(-3.0, 3.0 + 1e-9, 1e-2)
        gx, gy = np.meshgrid(grid, grid, indexing="ij")
        thetas = np.stack([gx.ravel(), gy.ravel()], axis=1)
        scores = thetas @ ds.deltas.T
        ll = ds.ys * log_logistic(scores) + (1 - ds.ys) * log_logistic(-scores)
        losses = -ll.sum(axis=1) + lam / 2 * (thetas**2).sum(axis=1)
        best = thetas[np.argmin(losses)]
        fine = np.arange(-1.5e-2, 1.5e-2 + 1e-12, 1e-3)
        fx, fy = np.meshgrid(best[0] + fine, best[1] + fine, indexing="ij")
        thetas = np.stack([fx.ravel(), fy.ravel()], axis=1)
        scores = thetas @ ds.deltas.T
        ll = ds.ys * log_logistic(scores) + (1 - ds.ys) * log_logistic(-scores)
        losses = -ll.sum(axis=1) + lam / 2 * (thetas**2).sum(axis=1)
        best = thetas[np.argmin(losses)]

        res = fit_mle(ds, MleConfig(lam=lam, tol=1e-10))
        assert res.converged
        np.testing.assert_allclose(res.theta, best, atol=1e-2)

    def test_gradient_norm_meets_tolerance(self):
        rng = np.random.default_rng(6)
        ds = random_dataset(rng, 30, 4)
        cfg = MleConfig(lam=0.2, tol=1e-8)
        res = fit_mle(ds, cfg)
        assert res.converged
        assert np.linalg.norm(nll_gradient(res.theta, ds, cfg.lam)) <= cfg.tol

    def test_label_flip_negates_estimate(self):
        rng = np.random.default_rng(7)
        ds = random_dataset(rng, 25, 3)
        flipped = PreferenceDataset(ds.deltas, 1.0 - ds.ys, 3)
        cfg = MleConfig(lam=0.4, tol=1e-10)
        a = fit_mle(ds, cfg).theta
        b = fit_mle(flipped, cfg).theta
        np.testing.assert_allclose(a, -b, atol=1e-6)

    def test_flipping_labels_and_deltas_is_identity(self):
        rng = np.random.default_rng(8)
        ds = random_dataset(rng, 25, 3)
        both = PreferenceDataset(-ds.deltas, 1.0 - ds.ys, 3)
        cfg = MleConfig(lam=0.4, tol=1e-10)
        np.testing.assert_allclose(fit_mle(ds, cfg).theta, fit_mle(both, cfg).theta, atol=1e-6)

    def test_warm_start_reaches_same_optimum(self):
        rng = np.random.default_rng(9)
        ds = random_dataset(rng, 40, 3)
        cfg = MleConfig(lam=0.3, tol=1e-10)
        cold = fit_mle(ds, cfg).theta
        warm = fit_mle(ds, cfg, warm_start=rng.standard_normal(3)).theta
        np.testing.assert_allclose(cold, warm, atol=1e-8)

    def test_nonconvergence_is_flagged(self):
        rng = np.random.default_rng(10)
        ds = random_dataset(rng, 40, 3)
        res = fit_mle(ds, MleConfig(lam=0.3, tol=1e-14, max_iters=1))
        assert not res.converged


class TestKappaMuBound:
    def test_at_zero_gap(self):
        assert kappa_mu_bound(0.0) == pytest.approx(0.25)

    def test_at_gap_two(self):
        p = float(1 / (1 + mpmath.e ** (-2)))
        assert kappa_mu_bound(2.0) == pytest.approx(p * (1 - p), rel=1e-12)
        assert kappa_mu_bound(2.0) == pytest.approx(0.10499, abs=5e-6)

    def test_monotone_decreasing_in_gap(self):
        rs = np.linspace(0.0, 10.0, 200)
        vals = [kappa_mu_bound(r) for r in rs]
        assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))


class TestDatasetValidation:
    def test_rejects_oversized_difference_norm(self):
        with pytest.raises(ValueError, match="exceeds"):
            PreferenceDataset(np.array([[2.5, 0.0]]), np.array([1.0]), 2)

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ValueError, match="bits"):
            PreferenceDataset(np.array([[1.0, 0.0]]), np.array([0.5]), 2)
