import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgpk.base_kernels import activation_moment, input_moments, mc_h_product
from mtgpk.core import (
    BaseKernelSpec,
    CcSpec,
    Dataset,
    DeepMtSpec,
    IcmSpec,
    LayerSpec,
    LmcComponent,
    LmcSpec,
    TaskCovariance,
)
from mtgpk.errors import DimensionMismatch, InputError, TaskIndexOutOfRange
from mtgpk.gp_engine import factorize
from mtgpk.multitask_kernels import (
    cc_eval,
    deep_mt_eval,
    gram,
    has_independent_tasks,
    icm_eval,
    kernel_matrix,
    lmc_eval,
    restrict_to_task,
)

from conftest import random_task_cov


class TestIcm:
    def test_zero_cross_covariance(self, rng):
        spec = IcmSpec(BaseKernelSpec("erf", bias_const=0.3), TaskCovariance.diagonal([1.0, 2.0]))
        for _ in range(10):
            x1, x2 = rng.standard_normal(3), rng.standard_normal(3)
            assert icm_eval(0, x1, 1, x2, spec) == 0.0

    def test_orthogonal_linear_inputs(self):
        spec = IcmSpec(BaseKernelSpec("linear"), TaskCovariance.from_matrix([[2.0, 0.0], [0.0, 1.0]]))
        assert icm_eval(0, [1.0, 1.0], 0, [1.0, -1.0], spec) == 0.0

    def test_task_matrix_is_scalar_times_omega(self, icm_erf, rng):
        x1, x2 = rng.standard_normal(2), rng.standard_normal(2)
        M = np.array([[icm_eval(a, x1, b, x2, icm_erf) for b in range(2)] for a in range(2)])
        s = M[0, 0] / icm_erf.task_cov.matrix[0, 0]
        np.testing.assert_allclose(M, s * icm_erf.task_cov.matrix, rtol=1e-12)

    def test_includes_bias_constant(self):
        spec = IcmSpec(BaseKernelSpec("linear", bias_const=0.5), TaskCovariance.identity(1))
        assert icm_eval(0, [2.0], 0, [3.0], spec) == pytest.approx(0.5 + 6.0)

    def test_task_out_of_range(self, icm_erf):
        with pytest.raises(TaskIndexOutOfRange):
            icm_eval(2, [0.0], 0, [0.0], icm_erf)

    def test_wrong_spec_type(self, icm_erf):
        with pytest.raises(InputError):
            lmc_eval(0, [0.0], 0, [0.0], icm_erf)

    def test_dimension_mismatch(self, icm_erf):
        with pytest.raises(DimensionMismatch):
            kernel_matrix(icm_erf, np.zeros((2, 1)), [0, 1], np.zeros((2, 2)), [0, 1])


class TestDeep:
    def test_depth_one_is_icm(self, rng):
        omega = TaskCovariance.from_matrix([[1.0, 0.8], [0.8, 1.0]])
        base = BaseKernelSpec("erf", bias_const=0.1)
        icm = IcmSpec(base, omega)
        deep = DeepMtSpec(base, (), omega, omega.scaled(0.1))
        for _ in range(5):
            x1, x2 = rng.standard_normal(2), rng.standard_normal(2)
            for a in range(2):
                for b in range(2):
                    assert deep_mt_eval(a, x1, b, x2, deep) == pytest.approx(icm_eval(a, x1, b, x2, icm), rel=1e-14)

    def test_diagonal_covariances_have_zero_cross(self):
        tc = TaskCovariance.diagonal([1.0, 2.0])
        deep = DeepMtSpec(BaseKernelSpec("relu"), (LayerSpec(0.1, 1.0),), tc, tc)
        assert deep_mt_eval(0, [0.3], 1, [0.4], deep) == 0.0


class TestLmc:
    def test_single_component_is_icm_without_bias(self, rng):
        base = BaseKernelSpec("relu", sigma_b2=0.2)
        tc = random_task_cov(rng, 3)
        lmc = LmcSpec((LmcComponent(base, tc),))
        icm = IcmSpec(base, tc)
        X = rng.standard_normal((5, 2))
        t = [0, 1, 2, 0, 1]
        np.testing.assert_allclose(kernel_matrix(lmc, X, t), kernel_matrix(icm, X, t), rtol=1e-14)

    def test_one_hot_components_decouple_tasks(self, rng):
        comps = tuple(LmcComponent(BaseKernelSpec("erf", sigma_u=s), TaskCovariance.diagonal(np.eye(2)[m] + 1e-300))
                      for m, s in enumerate((1.0, 100.0)))
        spec = LmcSpec(comps)
        assert lmc_eval(0, [0.2], 1, [0.5], spec) == 0.0
        only0 = IcmSpec(comps[0].base, TaskCovariance.identity(1))
        assert lmc_eval(0, [0.2], 0, [0.5], spec) == pytest.approx(icm_eval(0, [0.2], 0, [0.5], only0), rel=1e-12)

    def test_doubled_component(self, rng):
        c = LmcComponent(BaseKernelSpec("erf"), random_task_cov(rng, 2))
        one, two = LmcSpec((c,)), LmcSpec((c, c))
        assert lmc_eval(0, [0.1], 1, [0.7], two) == 2 * lmc_eval(0, [0.1], 1, [0.7], one)


class TestCc:
    def test_single_basis_is_icm(self, rng):
        base = BaseKernelSpec("erf", sigma_u=2.0)
        tc = random_task_cov(rng, 2)
        cc = CcSpec((base,), tc, 2)
        icm = IcmSpec(base, tc)
        X = rng.standard_normal((4, 1))
        np.testing.assert_allclose(kernel_matrix(cc, X, [0, 1, 1, 0]), kernel_matrix(icm, X, [0, 1, 1, 0]), rtol=1e-14)

    def test_odd_activations_ignore_off_diagonal_blocks(self, rng):
        bases = (BaseKernelSpec("erf", sigma_u=0.5), BaseKernelSpec("erf", sigma_u=4.0))
        grid = random_task_cov(rng, 4)
        cc = CcSpec(bases, grid, 2)
        lmc = LmcSpec(tuple(LmcComponent(b, TaskCovariance.from_matrix(cc.block(m, m))) for m, b in enumerate(bases)))
        X = rng.standard_normal((5, 1))
        t = [0, 1, 0, 1, 1]
        np.testing.assert_allclose(kernel_matrix(cc, X, t), kernel_matrix(lmc, X, t), rtol=1e-13)

    def test_relu_cross_term_against_joint_sampling(self):
        # bases with independent input weights U1, U2; the cross term is E[relu(x1.U1)] E[relu(x2.U2)]
        b1 = BaseKernelSpec("relu", sigma_u=1.0)
        b2 = BaseKernelSpec("relu", sigma_u=2.0)
        x1, x2 = np.array([0.8, -0.4]), np.array([0.3, 1.2])
        rng = np.random.default_rng(99)
        n = 10**6
        z1 = rng.standard_normal((n, 2)) @ (x1 * math.sqrt(1.0))
        z2 = rng.standard_normal((n, 2)) @ (x2 * math.sqrt(2.0))
        prod = np.maximum(z1, 0) * np.maximum(z2, 0)
        est, se = prod.mean(), prod.std(ddof=1) / math.sqrt(n)
        blocks = [[np.zeros((1, 1)), np.full((1, 1), 0.7)], [np.full((1, 1), 0.7), np.zeros((1, 1))]]
        # the grid must be PSD, so check the cross term through the difference of two specs
        diag_blocks = [[np.eye(1), np.zeros((1, 1))], [np.zeros((1, 1)), np.eye(1)]]
        full = [[np.eye(1), blocks[0][1]], [blocks[1][0], np.eye(1)]]
        with_cross = cc_eval(0, x1, 0, x2, CcSpec.from_blocks((b1, b2), full))
        without = cc_eval(0, x1, 0, x2, CcSpec.from_blocks((b1, b2), diag_blocks))
        # two cross blocks contribute: (1,2) at (x1, x2) and (2,1) at (x1, x2)
        est21 = (np.maximum(rng.standard_normal((n, 2)) @ (x1 * math.sqrt(2.0)), 0)
                 * np.maximum(rng.standard_normal((n, 2)) @ (x2 * math.sqrt(1.0)), 0))
        total = 0.7 * (est + est21.mean())
        total_se = 0.7 * math.hypot(se, est21.std(ddof=1) / math.sqrt(n))
        assert abs((with_cross - without) - total) <= 3 * total_se


class TestGram:
    def test_single_point(self, icm_erf):
        ds = Dataset([[0.4]], [1], [0.0], [0.1, 0.2])
        g = gram(ds, icm_erf)
        assert g.K.shape == (1, 1)
        assert g.K[0, 0] == pytest.approx(icm_eval(1, [0.4], 1, [0.4], icm_erf) + 0.2)

    def test_block_diagonal_for_uncorrelated_tasks(self, rng):
        spec = IcmSpec(BaseKernelSpec("erf"), TaskCovariance.diagonal([1.0, 3.0]))
        ds = Dataset(rng.standard_normal((6, 1)), [0, 0, 0, 1, 1, 1], np.zeros(6), [0.1, 0.1])
        K = gram(ds, spec).K
        assert np.all(K[:3, 3:] == 0) and np.all(K[3:, :3] == 0)

    @given(st.integers(0, 10_000), st.sampled_from(["icm", "deep", "lmc", "cc"]),
           st.sampled_from(["erf", "relu", "linear"]))
    @settings(max_examples=60, deadline=None)
    def test_gram_symmetric_and_factorizable(self, seed, kind, act):
        rng = np.random.default_rng(seed)
        T, n = 3, 8
        base = BaseKernelSpec(act, sigma_u=float(rng.uniform(0.1, 5)), sigma_b2=float(rng.uniform(0, 1)))
        if kind == "icm":
            spec = IcmSpec(base, random_task_cov(rng, T))
        elif kind == "deep":
            spec = DeepMtSpec(base, (LayerSpec(0.1, 1.3),), random_task_cov(rng, T), random_task_cov(rng, T))
        elif kind == "lmc":
            spec = LmcSpec((LmcComponent(base, random_task_cov(rng, T)),
                            LmcComponent(BaseKernelSpec(act), random_task_cov(rng, T))))
        else:
            spec = CcSpec((base, BaseKernelSpec(act)), random_task_cov(rng, 2 * T), T)
        ds = Dataset(rng.standard_normal((n, 2)), rng.integers(0, T, n), np.zeros(n), [0.05] * T)
        K = gram(ds, spec).K
        np.testing.assert_array_equal(K, K.T)
        assert factorize(K).jitter == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_kernel_symmetric_in_arguments(self, seed):
        rng = np.random.default_rng(seed)
        spec = CcSpec((BaseKernelSpec("relu"), BaseKernelSpec("erf", sigma_u=3.0)), random_task_cov(rng, 4), 2)
        x1, x2 = rng.standard_normal(2), rng.standard_normal(2)
        assert cc_eval(0, x1, 1, x2, spec) == pytest.approx(cc_eval(1, x2, 0, x1, spec), rel=1e-13, abs=1e-15)


class TestHelpers:
    def test_restrict_matches_diagonal_entry(self, rng):
        spec = CcSpec((BaseKernelSpec("relu"), BaseKernelSpec("relu", sigma_u=2.0)), random_task_cov(rng, 4), 2)
        one = restrict_to_task(spec, 1)
        assert kernel_matrix(one, [[0.3]], [0], [[0.9]], [0])[0, 0] == pytest.approx(cc_eval(1, [0.3], 1, [0.9], spec), rel=1e-12)

    def test_independence_flags(self, rng):
        assert has_independent_tasks(IcmSpec(BaseKernelSpec("erf"), TaskCovariance.diagonal([1.0, 2.0])))
        assert not has_independent_tasks(IcmSpec(BaseKernelSpec("erf"), random_task_cov(rng, 2)))
