import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgpk.bnn_sim import sample_gp_prior
from mtgpk.core import (
    BaseKernelSpec,
    Dataset,
    DeepMtSpec,
    IcmSpec,
    LayerSpec,
    LmcComponent,
    LmcSpec,
    TaskCovariance,
)
from mtgpk.errors import EmptyTask, InvalidBounds, NotPSDAfterJitter
from mtgpk.gp_engine import (
    MultitaskGP,
    SearchConfig,
    factorize,
    fit,
    log_marginal,
    per_task_baseline,
    predict,
    predictive_mean_weights,
)
from mtgpk.multitask_kernels import gram, kernel_matrix, restrict_to_task

from conftest import random_task_cov


class TestFactorize:
    def test_identity(self):
        f = factorize(np.eye(3))
        np.testing.assert_array_equal(f.L, np.eye(3))
        assert f.jitter == 0.0

    def test_hand_cholesky(self):
        L = factorize(np.array([[2.0, 1.0], [1.0, 2.0]])).L
        np.testing.assert_allclose(L, [[1.4142, 0.0], [0.7071, 1.2247]], atol=1e-3)

    def test_indefinite_fails_after_jitter(self):
        with pytest.raises(NotPSDAfterJitter):
            factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_singular_psd_gets_recorded_jitter(self):
        f = factorize(np.ones((3, 3)))
        assert 0 < f.jitter <= 1e-4

    def test_nonfinite(self):
        with pytest.raises(NotPSDAfterJitter):
            factorize(np.array([[np.nan]]))


def linear_icm(T=1, c=0.0):
    return IcmSpec(BaseKernelSpec("linear", bias_const=c), TaskCovariance.identity(T))


class TestPredict:
    def test_interpolates_noise_free_training_point(self, icm_erf, rng):
        X = rng.standard_normal((8, 2))
        t = np.array([0, 1] * 4)
        y = rng.standard_normal(8)
        ds = Dataset(X, t, y, [0.0, 0.0])
        r = predict(ds, icm_erf, X[3], int(t[3]))
        assert r.mean == pytest.approx(y[3], abs=1e-6)
        assert r.variance <= 1e-6

    def test_single_point_hand_solution(self):
        # identity activation: K(x, x') = x x'
        spec = linear_icm()
        ds = Dataset([[2.0]], [0], [3.0], [0.5])
        r = predict(ds, spec, np.array([1.5]), 0, include_noise=False)
        k11, ks, kss = 4.0, 3.0, 2.25
        assert r.mean == pytest.approx(ks * 3.0 / (k11 + 0.5), rel=1e-14)
        assert r.variance == pytest.approx(kss - ks ** 2 / (k11 + 0.5), rel=1e-14)
        assert predict(ds, spec, np.array([1.5]), 0).variance == pytest.approx(r.variance + 0.5, rel=1e-14)

    def test_alpha_of_identity_gram(self):
        # zero inputs with unit noise: C_N = I
        ds = Dataset(np.zeros((2, 1)), [0, 0], [1.0, 2.0], [1.0])
        np.testing.assert_allclose(predictive_mean_weights(ds, linear_icm()), [1.0, 2.0])

    def test_mean_is_cross_kernel_times_alpha(self, icm_erf, rng):
        ds = Dataset(rng.standard_normal((10, 2)), rng.integers(0, 2, 10), rng.standard_normal(10), [0.1, 0.2])
        alpha = predictive_mean_weights(ds, icm_erf)
        Xs = rng.standard_normal((20, 2))
        ts = rng.integers(0, 2, 20)
        mean, _ = MultitaskGP(ds, icm_erf).predict(Xs, ts)
        np.testing.assert_allclose(mean, kernel_matrix(icm_erf, Xs, ts, ds.X, ds.tasks) @ alpha, rtol=1e-12)

    def test_other_tasks_do_not_contribute_when_uncorrelated(self, rng):
        spec = IcmSpec(BaseKernelSpec("erf"), TaskCovariance.diagonal([1.0, 2.0]))
        ds = Dataset(rng.standard_normal((8, 1)), [0, 0, 0, 0, 1, 1, 1, 1], rng.standard_normal(8), [0.1, 0.1])
        Ks = kernel_matrix(spec, rng.standard_normal((5, 1)), [0] * 5, ds.X, ds.tasks)
        assert np.all(Ks[:, 4:] == 0.0)

    @pytest.mark.parametrize("kind", ["icm", "lmc", "deep"])
    def test_uncorrelated_tasks_match_independent_gps(self, kind, rng):
        base = BaseKernelSpec("erf", sigma_u=2.0, bias_const=0.2)
        diag = TaskCovariance.diagonal([1.0, 0.5])
        spec = {"icm": IcmSpec(base, diag),
                "lmc": LmcSpec((LmcComponent(base, diag), LmcComponent(BaseKernelSpec("relu"), diag.scaled(0.3)))),
                "deep": DeepMtSpec(base, (LayerSpec(0.1, 1.2),), diag, diag.scaled(0.1))}[kind]
        ds = Dataset(rng.standard_normal((16, 2)), rng.integers(0, 2, 16), rng.standard_normal(16), [0.05, 0.2])
        Xs, ts = rng.standard_normal((20, 2)), rng.integers(0, 2, 20)
        joint = MultitaskGP(ds, spec).predict(Xs, ts)
        split = per_task_baseline(ds, [restrict_to_task(spec, t) for t in range(2)]).predict(Xs, ts)
        np.testing.assert_allclose(joint[0], split[0], rtol=0, atol=1e-8)
        np.testing.assert_allclose(joint[1], split[1], rtol=0, atol=1e-8)

    def test_single_task_baseline_equals_full_model(self, rng):
        spec = IcmSpec(BaseKernelSpec("relu"), TaskCovariance.identity(1))
        ds = Dataset(rng.standard_normal((6, 1)), [0] * 6, rng.standard_normal(6), [0.1])
        Xs = rng.standard_normal((4, 1))
        a = MultitaskGP(ds, spec).predict(Xs, 0)
        b = per_task_baseline(ds, [spec]).predict(Xs, 0)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_empty_task(self, icm_erf):
        ds = Dataset([[0.0], [1.0]], [0, 0], [1.0, 2.0], [0.1, 0.1])
        with pytest.raises(EmptyTask):
            per_task_baseline(ds, [restrict_to_task(icm_erf, t) for t in range(2)])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_variance_non_negative_and_below_prior(self, seed):
        rng = np.random.default_rng(seed)
        spec = IcmSpec(BaseKernelSpec("erf", sigma_u=float(rng.uniform(0.5, 20))), random_task_cov(rng, 2))
        ds = Dataset(rng.uniform(-2, 2, (12, 1)), rng.integers(0, 2, 12), rng.standard_normal(12), [1e-3, 1e-3])
        Xs, ts = rng.uniform(-2, 2, (10, 1)), rng.integers(0, 2, 10)
        _, var = MultitaskGP(ds, spec).predict(Xs, ts, include_noise=False)
        prior = np.array([kernel_matrix(spec, x[None], [t])[0, 0] for x, t in zip(Xs, ts)])
        assert np.all(var >= 0) and np.all(var <= prior * (1 + 1e-9))


class TestLogMarginal:
    def test_single_point_zero_target(self):
        ds = Dataset([[0.0]], [0], [0.0], [0.3])
        assert log_marginal(ds, linear_icm()) == pytest.approx(-0.5 * math.log(0.3) - 0.5 * math.log(2 * math.pi))

    def test_zero_targets_leave_logdet(self, icm_erf, rng):
        ds = Dataset(rng.standard_normal((5, 2)), [0, 1, 0, 1, 0], np.zeros(5), [0.1, 0.1])
        K = gram(ds, icm_erf).K
        expected = -0.5 * np.linalg.slogdet(K)[1] - 2.5 * math.log(2 * math.pi)
        assert log_marginal(ds, icm_erf) == pytest.approx(expected, rel=1e-12)

    def test_doubling_targets_scales_quadratic_term(self, icm_erf, rng):
        X, t, y = rng.standard_normal((6, 2)), rng.integers(0, 2, 6), rng.standard_normal(6)
        base = log_marginal(Dataset(X, t, np.zeros(6), [0.1, 0.1]), icm_erf)
        q1 = log_marginal(Dataset(X, t, y, [0.1, 0.1]), icm_erf) - base
        q2 = log_marginal(Dataset(X, t, 2 * y, [0.1, 0.1]), icm_erf) - base
        assert q2 == pytest.approx(4 * q1, rel=1e-10)

    def test_matches_dense_gaussian_density(self, icm_erf, rng):
        ds = Dataset(rng.standard_normal((7, 2)), rng.integers(0, 2, 7), rng.standard_normal(7), [0.2, 0.1])
        from scipy.stats import multivariate_normal

        K = gram(ds, icm_erf).K
        assert log_marginal(ds, icm_erf) == pytest.approx(multivariate_normal(np.zeros(7), K).logpdf(ds.y), rel=1e-10)


class TestFit:
    def test_fit_beats_generator(self):
        truth = IcmSpec(BaseKernelSpec("erf", sigma_u=3.0), TaskCovariance.from_matrix([[1.0, 0.6], [0.6, 0.8]]))
        rng = np.random.default_rng(0)
        X = rng.uniform(-2, 2, (60, 1))
        t = np.arange(60) % 2
        y = sample_gp_prior(truth, X, t, 1) + 0.1 * rng.standard_normal(60)
        ds = Dataset(X, t, y, [0.01, 0.01])
        at_truth = log_marginal(ds, truth)
        start = IcmSpec(BaseKernelSpec("erf", sigma_u=1.0), TaskCovariance.identity(2))
        res = fit(ds.with_noise([0.1, 0.1]), start, SearchConfig(max_iters=3000))
        assert res.log_marginal >= at_truth - 1e-3
        assert res.log_marginal == pytest.approx(log_marginal(ds.with_noise(res.noise_vars), res.spec), rel=1e-12)

    def test_linear_regression_sanity(self):
        X = np.linspace(-1, 1, 20)[:, None]
        ds = Dataset(X, [0] * 20, 2 * X[:, 0], [1e-3])
        res = fit(ds, IcmSpec(BaseKernelSpec("linear"), TaskCovariance.identity(1)))
        mean, _ = MultitaskGP(ds.with_noise(res.noise_vars), res.spec).predict(X, 0)
        assert np.mean((mean - ds.y) ** 2) <= 1e-4

    def test_zero_iterations_returns_initial(self, icm_erf):
        ds = Dataset([[0.0], [1.0]], [0, 1], [1.0, 2.0], [0.1, 0.1])
        res = fit(ds, icm_erf, SearchConfig(max_iters=0))
        assert res.spec is icm_erf and not res.converged and res.iterations == 0
        np.testing.assert_array_equal(res.noise_vars, [0.1, 0.1])

    def test_restarts_never_lose_evidence(self, icm_erf, rng):
        ds = Dataset(rng.standard_normal((12, 2)), rng.integers(0, 2, 12), rng.standard_normal(12), [0.1, 0.1])
        one = fit(ds, icm_erf, SearchConfig(max_iters=200))
        more = fit(ds, icm_erf, SearchConfig(max_iters=200, restarts=2))
        assert more.log_marginal >= one.log_marginal

    def test_deterministic(self, icm_erf, rng):
        ds = Dataset(rng.standard_normal((10, 2)), rng.integers(0, 2, 10), rng.standard_normal(10), [0.1, 0.1])
        a = fit(ds, icm_erf, SearchConfig(max_iters=300, restarts=1, seed=4))
        b = fit(ds, icm_erf, SearchConfig(max_iters=300, restarts=1, seed=4))
        assert a.log_marginal == b.log_marginal

    def test_zero_variances_stay_fixed(self, rng):
        spec = IcmSpec(BaseKernelSpec("relu", sigma_b2=0.0), TaskCovariance.identity(1))
        ds = Dataset(rng.standard_normal((10, 1)), [0] * 10, rng.standard_normal(10), [0.1])
        res = fit(ds, spec, SearchConfig(max_iters=200))
        assert res.spec.base.sigma_b2 == 0.0 and res.spec.base.bias_const == 0.0

    def test_bad_bounds(self):
        with pytest.raises(InvalidBounds):
            SearchConfig(log_var_bounds=(1.0, 0.0))

    def test_initial_point_outside_bounds(self, icm_erf):
        ds = Dataset([[0.0], [1.0]], [0, 1], [1.0, 2.0], [0.1, 0.1])
        with pytest.raises(InvalidBounds):
            fit(ds, icm_erf, SearchConfig(log_var_bounds=(0.0, 1.0)))

    def test_fit_noise_needs_positive_start(self, icm_erf):
        ds = Dataset([[0.0], [1.0]], [0, 1], [1.0, 2.0], [0.0, 0.1])
        with pytest.raises(InvalidBounds):
            fit(ds, icm_erf)
