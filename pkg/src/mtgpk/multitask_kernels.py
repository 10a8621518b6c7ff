"""ICM, deep multitask, LMC and CC kernels and Gram assembly.

Every kernel is evaluated in blocks by :func:`kernel_matrix`; the scalar
``*_eval`` functions are one-row calls into the same code, so identities
between kernel families hold to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base_kernels import activation_mean, activation_moment, deep_moments, input_moments
from .core import (
    CcSpec,
    Dataset,
    DeepMtSpec,
    IcmSpec,
    LmcComponent,
    LmcSpec,
    TaskCovariance,
    check_task_index,
)
from .errors import DimensionMismatch, InputError


@dataclass(frozen=True, eq=False)
class GramMatrix:
    K: np.ndarray
    with_noise: bool


def _as_rows(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _task_block(omega, t1, t2):
    return omega[np.ix_(t1, t2)]


def kernel_matrix(spec, X1, t1, X2=None, t2=None) -> np.ndarray:
    """Cross-covariance ``K[i, j] = K_{t1[i] t2[j]}(X1[i], X2[j])``.

    With ``X2``/``t2`` omitted the block of ``(X1, t1)`` against itself is
    returned, exactly symmetric.
    """
    X1 = _as_rows(X1)
    t1 = np.asarray(t1, dtype=np.int64).ravel()
    same = X2 is None
    if same:
        t2 = t1
    else:
        X2 = _as_rows(X2)
        t2 = np.asarray(t2, dtype=np.int64).ravel()
        if X1.shape[1] != X2.shape[1]:
            raise DimensionMismatch(f"inputs have dimensions {X1.shape[1]} and {X2.shape[1]}")
    if len(t1) != len(X1) or len(t2) != (len(X1) if same else len(X2)):
        raise DimensionMismatch("task label count does not match input rows")
    T = spec.n_tasks
    check_task_index(t1, T)
    check_task_index(t2, T)
    K = _dispatch(spec, X1, t1, None if same else X2, t2)
    return 0.5 * (K + K.T) if same else K


def _dispatch(spec, X1, t1, X2, t2):

    if isinstance(spec, IcmSpec):
        m = input_moments(spec.base, X1, X2)
        scale = spec.base.bias_const + activation_moment(spec.base.activation, m)
        return _task_block(spec.task_cov.matrix, t1, t2) * scale

    if isinstance(spec, DeepMtSpec):
        m = deep_moments(spec.base, spec.layers, X1, X2)
        return (_task_block(spec.bias_task_cov.matrix, t1, t2)
                + _task_block(spec.task_cov.matrix, t1, t2) * activation_moment(spec.base.activation, m))

    if isinstance(spec, LmcSpec):
        K = 0.0
        for comp in spec.components:
            m = deep_moments(comp.base, comp.layers, X1, X2)
            K = K + _task_block(comp.task_cov.matrix, t1, t2) * activation_moment(comp.base.activation, m)
        return K

    if isinstance(spec, CcSpec):
        moments = [input_moments(b, X1, X2) for b in spec.bases]
        K = 0.0
        for m, (bm, mm) in enumerate(zip(spec.bases, moments)):
            for n, (bn, mn) in enumerate(zip(spec.bases, moments)):
                if m == n:
                    expect = activation_moment(bm.activation, mm)
                else:
                    # independent input weights per basis: product of means
                    expect = activation_mean(bm.activation, mm.k11) * activation_mean(bn.activation, mn.k22)
                K = K + _task_block(spec.block(m, n), t1, t2) * expect
        return K

    raise InputError(f"not a kernel spec: {type(spec).__name__}")


def _scalar(spec, t1, x1, t2, x2) -> float:
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    return float(kernel_matrix(spec, x1[None, :], [t1], x2[None, :], [t2])[0, 0])


def _require(spec, kind):
    if not isinstance(spec, kind):
        raise InputError(f"expected {kind.__name__}, got {type(spec).__name__}")


def icm_eval(t1, x1, t2, x2, spec: IcmSpec) -> float:
    """``Omega[t1, t2] * (C + F_h(input moments))``."""
    _require(spec, IcmSpec)
    return _scalar(spec, t1, x1, t2, x2)


def deep_mt_eval(t1, x1, t2, x2, spec: DeepMtSpec) -> float:
    _require(spec, DeepMtSpec)
    return _scalar(spec, t1, x1, t2, x2)


def lmc_eval(t1, x1, t2, x2, spec: LmcSpec) -> float:
    _require(spec, LmcSpec)
    return _scalar(spec, t1, x1, t2, x2)


def cc_eval(t1, x1, t2, x2, spec: CcSpec) -> float:
    _require(spec, CcSpec)
    return _scalar(spec, t1, x1, t2, x2)


def kernel_eval(spec, t1, x1, t2, x2) -> float:
    return _scalar(spec, t1, x1, t2, x2)


def gram(ds: Dataset, spec, add_noise: bool = True) -> GramMatrix:
    """Gram matrix over ``ds``; with ``add_noise`` this is C_N (per-task noise on the diagonal)."""
    K = kernel_matrix(spec, ds.X, ds.tasks)
    if add_noise:
        K = K + np.diag(ds.noise_vars[ds.tasks])
    return GramMatrix(K, bool(add_noise))


def restrict_to_task(spec, task: int):
    """Single-task (T = 1) kernel equal to the ``(task, task)`` entry of ``spec``."""
    check_task_index([task], spec.n_tasks)
    if isinstance(spec, IcmSpec):
        return IcmSpec(spec.base, spec.task_cov.restrict(task))
    if isinstance(spec, DeepMtSpec):
        return DeepMtSpec(spec.base, spec.layers, spec.task_cov.restrict(task), spec.bias_task_cov.restrict(task))
    if isinstance(spec, LmcSpec):
        return LmcSpec(tuple(LmcComponent(c.base, c.task_cov.restrict(task), c.layers) for c in spec.components))
    if isinstance(spec, CcSpec):
        idx = [m * spec.n_tasks + task for m in range(len(spec.bases))]
        return CcSpec(spec.bases, TaskCovariance.from_matrix(spec.grid.matrix[np.ix_(idx, idx)]), 1)
    raise InputError(f"not a kernel spec: {type(spec).__name__}")


def task_covariances(spec):
    """All task covariance objects of ``spec`` (the CC grid counts as one)."""
    if isinstance(spec, IcmSpec):
        return [spec.task_cov]
    if isinstance(spec, DeepMtSpec):
        return [spec.task_cov, spec.bias_task_cov]
    if isinstance(spec, LmcSpec):
        return [c.task_cov for c in spec.components]
    if isinstance(spec, CcSpec):
        return [spec.grid]
    raise InputError(f"not a kernel spec: {type(spec).__name__}")


def has_independent_tasks(spec) -> bool:
    """True when every cross-task covariance of ``spec`` is exactly zero."""
    if isinstance(spec, CcSpec):
        T = spec.n_tasks
        g = spec.grid.matrix
        task_of = np.arange(g.shape[0]) % T
        return bool(np.all(g[task_of[:, None] != task_of[None, :]] == 0))
    return all(tc.is_diagonal() for tc in task_covariances(spec))
