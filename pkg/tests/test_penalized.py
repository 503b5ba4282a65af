import math

import numpy as np
import pytest

from nsl.errors import InputError, RefusalError
from nsl.penalized import (AugmentedDesign, CoefficientEstimate, PenaltySpec, brute_force_l0,
                           estimate_sigma, fit_path, fit_single, lambda_grid, objective,
                           penalty_value, sweep_objectives, threshold_update, tune)


def scad_pen(t, lam, a=3.7):
    if t <= lam:
        return lam * t
    if t <= a * lam:
        return (2 * a * lam * t - t * t - lam * lam) / (2 * (a - 1))
    return lam * lam * (a + 1) / 2


def random_instance(seed, n=30, p=8, K=2, s=3, signal=2.0, noise=0.3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    F = rng.standard_normal((n, K))
    F = F / np.linalg.norm(F, axis=0) * math.sqrt(n)
    beta = np.zeros(p)
    beta[rng.choice(p, s, replace=False)] = signal * rng.choice([-1, 1], s)
    gamma = np.zeros(K)
    gamma[0] = signal
    y = X @ beta + F @ gamma + noise * rng.standard_normal(n)
    return y, AugmentedDesign.build(X, F), beta, gamma


class TestPenaltyValue:
    def test_hard(self):
        spec = PenaltySpec("hard", 1.0)
        assert penalty_value(spec, 0) == 0
        assert penalty_value(spec, 0.5) == pytest.approx(0.375)
        assert penalty_value(spec, 1.0) == pytest.approx(0.5)
        assert penalty_value(spec, 7.0) == pytest.approx(0.5)

    def test_l0(self):
        assert penalty_value(PenaltySpec("l0", 2.0), 0.001) == pytest.approx(2.0)
        assert penalty_value(PenaltySpec("l0", 2.0), 0.0) == 0.0

    def test_scad_pieces(self):
        spec = PenaltySpec("scad", 1.0)
        for t in (0.3, 1.0, 2.0, 3.7, 5.0):
            assert penalty_value(spec, t) == pytest.approx(scad_pen(t, 1.0))

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            penalty_value(PenaltySpec("lasso", 1.0), -1.0)

    def test_spec_validation(self):
        with pytest.raises(InputError):
            PenaltySpec("ridge")
        with pytest.raises(InputError):
            PenaltySpec("scad", scad_a=2.0)


class TestThreshold:
    def test_hard(self):
        spec = PenaltySpec("hard", 1.0)
        assert threshold_update(spec, 0.9) == 0
        assert threshold_update(spec, 1.5) == 1.5
        assert threshold_update(spec, 1.0) == 0  # tie maps to zero

    def test_lasso(self):
        spec = PenaltySpec("lasso", 1.0)
        assert threshold_update(spec, 1.5) == pytest.approx(0.5)
        assert threshold_update(spec, -0.4) == 0

    def test_elastic_net(self):
        spec = PenaltySpec("elastic_net", 1.0, enet_mix=0.5)
        assert threshold_update(spec, 2.0) == pytest.approx(1.5 / 1.5)

    @pytest.mark.parametrize("z", [1.8, 0.4, -1.2, 2.5, -3.0, 4.2])
    def test_scad_grid_oracle(self, z):
        grid = np.arange(-3.0, 3.0 + 5e-6, 1e-5)
        if abs(z) > 3:
            grid = np.arange(-5.0, 5.0 + 5e-6, 1e-5)
        a, lam = 3.7, 1.0
        t = np.abs(grid)
        pen = np.where(t <= lam, lam * t,
                       np.where(t <= a * lam, (2 * a * lam * t - t * t - lam * lam) / (2 * (a - 1)),
                                lam * lam * (a + 1) / 2))
        best = grid[np.argmin(0.5 * (z - grid) ** 2 + pen)]
        assert threshold_update(PenaltySpec("scad", lam), z) == pytest.approx(best, abs=1e-4)

    @pytest.mark.parametrize("family", ["hard", "l0", "lasso", "scad", "elastic_net"])
    def test_univariate_minimiser(self, family):
        spec = PenaltySpec(family, 0.8)
        grid = np.linspace(-4, 4, 80001)
        for z in np.random.default_rng(0).uniform(-3, 3, 20):
            b = threshold_update(spec, z)
            f = lambda v: 0.5 * (z - v) ** 2 + penalty_value(spec, abs(v))
            assert f(b) <= min(f(v) for v in grid[::40]) + 1e-9


class TestObjective:
    def test_zero(self):
        y, d, *_ = random_instance(0)
        val = objective(y, d, (np.zeros(d.p), np.zeros(d.K)), PenaltySpec("hard", 0.3))
        assert val == pytest.approx(y @ y / (2 * d.n))

    def test_exact_fit_l0(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((20, 5))
        beta = np.array([1.0, 0, -2.0, 0, 0.5])
        d = AugmentedDesign.build(X)
        lam = 0.7
        assert objective(X @ beta, d, (beta, np.zeros(0)), PenaltySpec("l0", lam)) == pytest.approx(3 * lam ** 2 / 2)

    @pytest.mark.parametrize("family", ["hard", "lasso", "scad", "elastic_net"])
    def test_scalar_loop(self, family):
        rng = np.random.default_rng(2)
        n, p, K = 20, 5, 2
        X = rng.standard_normal((n, p)) * rng.uniform(0.5, 3, p)
        F = rng.standard_normal((n, K))
        F = F / np.linalg.norm(F, axis=0) * math.sqrt(n)
        y = rng.standard_normal(n)
        beta, gamma = rng.standard_normal(p), rng.standard_normal(K)
        spec = PenaltySpec(family, 0.6)
        rss = 0.0
        for i in range(n):
            fit_i = sum(X[i, j] * beta[j] for j in range(p)) + sum(F[i, k] * gamma[k] for k in range(K))
            rss += (y[i] - fit_i) ** 2
        pen = 0.0
        for j in range(p):
            norm_j = math.sqrt(sum(X[i, j] ** 2 for i in range(n)) / n)
            pen += penalty_value(spec, abs(beta[j] * norm_j))
        for k in range(K):
            pen += penalty_value(spec, abs(gamma[k]))
        d = AugmentedDesign.build(X, F)
        assert objective(y, d, (beta, gamma), spec) == pytest.approx(rss / (2 * n) + pen, rel=1e-12)

    def test_dimension_mismatch(self):
        y, d, *_ = random_instance(0)
        with pytest.raises(InputError):
            objective(y, d, (np.zeros(3), np.zeros(d.K)), PenaltySpec())


class TestDesign:
    def test_score_norm_checked(self):
        with pytest.raises(InputError):
            AugmentedDesign.build(np.ones((4, 2)), 3 * np.ones((4, 1)))

    def test_zero_column_dropped(self):
        X = np.c_[np.random.default_rng(0).standard_normal((10, 2)), np.zeros(10)]
        with pytest.warns(UserWarning):
            d = AugmentedDesign.build(X)
        assert d.D.shape[1] == 2
        est = fit_single(X[:, 0] * 2, d, PenaltySpec("lasso", 0.01))
        assert est.beta[2] == 0

    def test_standardized_norms(self):
        _, d, *_ = random_instance(3)
        np.testing.assert_allclose(np.linalg.norm(d.D, axis=0), math.sqrt(d.n), rtol=1e-12)


class TestFitPath:
    def test_orthonormal_exact_recovery(self):
        n, p = 40, 6
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((n, p)))
        X = Q * math.sqrt(n)
        beta0 = np.array([3.0, 0, -2.0, 0, 0, 1.5])
        d = AugmentedDesign.build(X)
        est = fit_single(X @ beta0, d, PenaltySpec("hard", 1.0))
        np.testing.assert_allclose(est.beta, beta0, atol=1e-8)

    def test_lasso_all_zero_above_lambda_max(self):
        y, d, *_ = random_instance(4)
        lam_max = lambda_grid(y, d)[0]
        est = fit_single(y, d, PenaltySpec("lasso", lam_max * 1.0001))
        assert est.support.size == 0

    def test_grid_shape(self):
        y, d, *_ = random_instance(5)
        g = lambda_grid(y, d)
        assert g.size == 100
        assert g[-1] == pytest.approx(g[0] * 1e-3)
        assert np.all(np.diff(g) < 0)

    def test_grid_must_decrease(self):
        y, d, *_ = random_instance(5)
        with pytest.raises(InputError):
            fit_path(y, d, PenaltySpec(), [0.1, 0.2])

    @pytest.mark.parametrize("family", ["hard", "l0", "lasso", "scad", "elastic_net"])
    def test_objective_monotone_per_sweep(self, family):
        for seed in range(10):
            y, d, *_ = random_instance(seed, n=40, p=15)
            lam = lambda_grid(y, d)[30]
            objs = sweep_objectives(y, d, PenaltySpec(family, lam))
            assert objs.size >= 2
            assert np.all(np.diff(objs) <= 1e-12 * np.maximum(np.abs(objs[:-1]), 1))

    @pytest.mark.parametrize("family", ["hard", "l0"])
    def test_hard_threshold_gap(self, family):
        y, d, *_ = random_instance(6, n=40, p=15)
        for est in fit_path(y, d, PenaltySpec(family), lambda_grid(y, d, 30)):
            b = np.abs(d.to_standardized(est.beta, est.gamma))
            assert np.all((b == 0) | (b > est.lam - 1e-10))

    def test_lasso_kkt(self):
        y, d, *_ = random_instance(7, n=40, p=15)
        for est in fit_path(y, d, PenaltySpec("lasso"), lambda_grid(y, d, 20), tol=1e-10):
            b = d.to_standardized(est.beta, est.gamma)
            g = d.D.T @ (y - d.D @ b) / d.n
            zero = b == 0
            assert np.all(np.abs(g[zero]) <= est.lam + 1e-6)
            np.testing.assert_allclose(g[~zero], est.lam * np.sign(b[~zero]), atol=1e-6)

    @pytest.mark.parametrize("family", ["hard", "lasso", "scad"])
    def test_scale_equivariance(self, family):
        y, d, *_ = random_instance(8, n=40, p=12)
        X2 = d.X.copy()
        X2[:, 3] *= 2
        d2 = AugmentedDesign.build(X2, d.F_hat)
        spec = PenaltySpec(family, lambda_grid(y, d)[25])
        e1, e2 = fit_single(y, d, spec), fit_single(y, d2, spec)
        assert e2.beta[3] == pytest.approx(e1.beta[3] / 2, abs=1e-10)
        np.testing.assert_allclose(d2.to_standardized(e2.beta, e2.gamma),
                                   d.to_standardized(e1.beta, e1.gamma), atol=1e-10)
        assert e2.objective_value == pytest.approx(e1.objective_value, rel=1e-10)

    def test_support_cap_and_box(self):
        y, d, *_ = random_instance(9, n=40, p=15, s=6)
        spec = PenaltySpec("hard", support_cap_M=8.0, gamma_box_T=0.5)
        assert spec.max_support == 3
        for est in fit_path(y, d, spec, lambda_grid(y, d, 30)):
            assert est.support.size < 4
            assert np.all(np.abs(est.gamma) <= 0.5 + 1e-12)

    def test_coordinatewise_optimality(self):
        y, d, *_ = random_instance(10, n=40, p=15)
        spec = PenaltySpec("hard")
        for est in fit_path(y, d, spec, lambda_grid(y, d, 20), tol=1e-9):
            b = d.to_standardized(est.beta, est.gamma)
            r = y - d.D @ b
            sp = spec.with_lambda(est.lam)
            for j in range(b.size):
                z = b[j] + d.D[:, j] @ r / d.n
                new = min(max(threshold_update(sp, z), -sp.gamma_box_T), sp.gamma_box_T)
                assert abs(new - b[j]) <= 1e-6

    def test_fixed_zero_matches_no_factor_fit(self):
        y, d, *_ = random_instance(11, n=40, p=15)
        bare = AugmentedDesign.build(d.X)
        spec = PenaltySpec("hard", support_cap_M=14.0)
        grid = lambda_grid(y, bare, 30)
        mask = np.r_[np.zeros(d.p, bool), np.ones(d.K, bool)]
        with_f = fit_path(y, d, spec, grid, fixed_zero=mask)
        without = fit_path(y, bare, spec, grid)
        for a, b in zip(with_f, without):
            assert np.all(a.gamma == 0)
            np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)

    def test_deterministic(self):
        y, d, *_ = random_instance(12, n=40, p=15)
        a = fit_path(y, d, PenaltySpec("scad"), seed=3)
        b = fit_path(y, d, PenaltySpec("scad"), seed=3)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.beta, eb.beta)

    def test_nonconvergence_flagged(self):
        y, d, *_ = random_instance(13, n=40, p=15)
        est = fit_single(y, d, PenaltySpec("lasso", 1e-4), max_iter=1, tol=1e-14)
        assert not est.converged
        assert "warning" in est.diagnostics


class TestTune:
    def _est(self, lam, beta):
        return CoefficientEstimate(np.asarray(beta, float), np.zeros(0), lam, 0.0)

    def test_single(self):
        e = self._est(1.0, [1.0])
        assert tune([e], np.ones(3), np.ones((3, 1))) is e

    def test_picks_smaller_error(self):
        X = np.ones((4, 1))
        y = np.full(4, 1.0)
        bad, good = self._est(2.0, [0.0]), self._est(1.0, [0.5])
        # validation MSE 1.0 vs 0.25
        assert tune([bad, good], y, X) is good

    def test_tie_goes_to_larger_lambda(self):
        X = np.ones((2, 1))
        small, large = self._est(0.5, [1.0]), self._est(2.0, [1.0])
        assert tune([small, large], np.ones(2), X) is large

    def test_empty(self):
        with pytest.raises(InputError):
            tune([], np.ones(1), np.ones((1, 1)))


class TestBruteForce:
    def test_zero_response(self):
        _, d, *_ = random_instance(0, p=6)
        est = brute_force_l0(np.zeros(d.n), d, PenaltySpec("l0", 0.5), 4)
        assert est.support.size == 0
        assert est.objective_value == 0.0

    def test_single_column(self):
        x = np.random.default_rng(0).standard_normal((25, 1))
        d = AugmentedDesign.build(x)
        est = brute_force_l0(3 * x[:, 0], d, PenaltySpec("l0", 0.5), 2)
        assert list(est.support) == [0]

    def test_beats_every_competitor(self):
        y, d, *_ = random_instance(1, n=25, p=8)
        spec = PenaltySpec("l0", 0.4)
        best = brute_force_l0(y, d, spec, 5)
        rng = np.random.default_rng(0)
        for _ in range(300):
            b = np.zeros(10)
            S = rng.choice(10, rng.integers(1, 5), replace=False)
            b[S], *_ = np.linalg.lstsq(d.D[:, S], y, rcond=None)
            beta, gamma = d.from_standardized(b)
            gamma = np.clip(gamma, -50, 50)
            assert best.objective_value <= objective(y, d, (beta, gamma), spec) + 1e-12

    def test_limits(self):
        X = np.random.default_rng(0).standard_normal((30, 21))
        with pytest.raises(RefusalError):
            brute_force_l0(np.zeros(30), AugmentedDesign.build(X), PenaltySpec("l0", 1.0), 3)

    def test_box_respected(self):
        rng = np.random.default_rng(2)
        F = rng.standard_normal((30, 1))
        F = F / np.linalg.norm(F) * math.sqrt(30)
        d = AugmentedDesign.build(rng.standard_normal((30, 3)), F)
        est = brute_force_l0(5 * F[:, 0], d, PenaltySpec("l0", 0.1, gamma_box_T=2.0), 3)
        assert est.gamma[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("family", ["hard", "l0"])
    def test_multistart_never_below_oracle(self, family):
        for seed in range(15):
            y, d, *_ = random_instance(100 + seed)
            spec = PenaltySpec(family, 0.5, support_cap_M=12.0)
            est = fit_single(y, d, spec)
            oracle = brute_force_l0(y, d, spec, 12)
            assert est.objective_value >= oracle.objective_value - 1e-9


class TestSigma:
    def test_exact_fit(self):
        X = np.random.default_rng(0).standard_normal((10, 2))
        d = AugmentedDesign.build(X)
        est = CoefficientEstimate(np.array([1.0, 2.0]), np.zeros(0), 0.0, 0.0)
        assert estimate_sigma(X @ [1.0, 2.0], d, est) == pytest.approx(0.0, abs=1e-12)

    def test_null_model(self):
        y = np.random.default_rng(1).standard_normal(500)
        d = AugmentedDesign.build(np.ones((500, 1)))
        est = CoefficientEstimate(np.zeros(1), np.zeros(0), 0.0, 0.0)
        assert estimate_sigma(y, d, est) == pytest.approx(np.sqrt(y @ y / 499), rel=1e-12)

    def test_too_large_support(self):
        X = np.eye(3)
        est = CoefficientEstimate(np.ones(3), np.zeros(0), 0.0, 0.0)
        with pytest.raises(InputError):
            estimate_sigma(np.ones(3), AugmentedDesign.build(X), est)
