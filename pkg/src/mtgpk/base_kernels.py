"""Scalar kernel building blocks.

``F_h`` maps the second moments ``(k11, k12, k22)`` of a zero-mean Gaussian
pair ``(z1, z2)`` to ``E[h(z1) h(z2)]``. Closed forms are provided for erf
(arcsine kernel), ReLU (first-order arc-cosine kernel) and the identity, and
:func:`mc_h_product` estimates the same expectation by sampling so the
closed forms can be checked independently.

All moment functions broadcast: the fields of :class:`KernelMoments` may be
floats or arrays.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from .core import ACTIVATIONS, BaseKernelSpec, LayerSpec
from .errors import DimensionMismatch, InputError, NumericalError
from .stats import MomentAccumulator

_CLAMP_ASSERT = 1e-6


class KernelMoments(NamedTuple):
    k11: np.ndarray
    k12: np.ndarray
    k22: np.ndarray


def _clamp_unit(a):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericalError("kernel moments overflowed to a non-finite correlation")
    assert np.all(np.abs(a) <= 1 + _CLAMP_ASSERT), "correlation overshoots [-1, 1] by more than round-off"
    return np.clip(a, -1.0, 1.0)


def f_erf(m: KernelMoments):
    r"""``E[erf(z1) erf(z2)] = (2/pi) asin(2 k12 / sqrt((1 + 2 k11)(1 + 2 k22)))``."""
    arg = 2.0 * np.asarray(m.k12) / np.sqrt((1.0 + 2.0 * np.asarray(m.k11)) * (1.0 + 2.0 * np.asarray(m.k22)))
    return (2.0 / math.pi) * np.arcsin(_clamp_unit(arg))


def f_relu(m: KernelMoments):
    """Arc-cosine kernel of degree one; zero when either variance is zero."""
    k11 = np.asarray(m.k11, dtype=float)
    k12 = np.asarray(m.k12, dtype=float)
    k22 = np.asarray(m.k22, dtype=float)
    norm = np.sqrt(k11 * k22)
    positive = norm > 0
    safe = np.where(positive, norm, 1.0)
    rho = _clamp_unit(np.where(positive, k12 / safe, 0.0))
    # sin(theta) from rho directly so anti-parallel inputs give exactly 0
    sin_theta = np.sqrt((1.0 - rho) * (1.0 + rho))
    value = norm * (sin_theta + (math.pi - np.arccos(rho)) * rho) / (2.0 * math.pi)
    return np.where(positive, value, 0.0)


def f_linear(m: KernelMoments):
    return np.asarray(m.k12, dtype=float) * 1.0


_F = {"erf": f_erf, "relu": f_relu, "linear": f_linear}


def activation_moment(activation: str, m: KernelMoments):
    """Dispatch to the closed-form ``F_h`` of ``activation``."""
    try:
        return _F[activation](m)
    except KeyError:
        raise InputError(f"unknown activation {activation!r}") from None


def activation_mean(activation: str, k):
    """``E[h(z)]`` for ``z ~ N(0, k)``. Only ReLU has a non-zero mean."""
    k = np.asarray(k, dtype=float)
    if activation == "relu":
        return np.sqrt(k / (2.0 * math.pi))
    if activation in ACTIVATIONS:
        return np.zeros_like(k)
    raise InputError(f"unknown activation {activation!r}")


def activation_fn(activation: str):
    if activation == "erf":
        return erf
    if activation == "relu":
        return lambda z: np.maximum(z, 0.0)
    if activation == "linear":
        return lambda z: z
    raise InputError(f"unknown activation {activation!r}")


def k0(x1, x2, spec: BaseKernelSpec) -> float:
    """Input-layer pre-activation covariance ``sigma_b2 + omega_v2 * x1~ . x2~``.

    ``x~`` are the inputs scaled by ``sqrt(Sigma_u)`` and, when
    ``spec.input_bias_var > 0``, augmented with the constant coordinate, so
    the result is ``sigma_b2 + omega_v2 * (input_bias_var + x1^T Sigma_u x2)``.
    """
    x1 = np.ravel(np.asarray(x1, dtype=float))
    x2 = np.ravel(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise DimensionMismatch(f"inputs have dimensions {x1.size} and {x2.size}")
    a = spec.scaled_inputs(x1[None, :])[0]
    b = spec.scaled_inputs(x2[None, :])[0]
    return float(spec.sigma_b2 + spec.omega_v2 * np.dot(a, b))


def input_moments(spec: BaseKernelSpec, X1, X2=None) -> KernelMoments:
    """Vectorized :func:`k0` moments.

    Returns ``k11`` as an (n1, 1) column, ``k12`` as (n1, n2) and ``k22`` as a
    (1, n2) row. When ``X2`` is omitted the cross matrix is exactly symmetric.
    """
    A = spec.scaled_inputs(X1)
    same = X2 is None
    B = A if same else spec.scaled_inputs(X2)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"inputs have dimensions {X1.shape[-1]} and {np.shape(X2)[-1]}")
    cross = A @ B.T
    if same:
        cross = 0.5 * (cross + cross.T)
    diag1 = np.einsum("ij,ij->i", A, A)
    diag2 = diag1 if same else np.einsum("ij,ij->i", B, B)
    b, w = spec.sigma_b2, spec.omega_v2
    return KernelMoments((b + w * diag1)[:, None], b + w * cross, (b + w * diag2)[None, :])


def layer_step(activation: str, layer: LayerSpec, m: KernelMoments) -> KernelMoments:
    """One step ``K^l = sigma_b2 + omega_v2 * F_h(K^{l-1})`` on all three moments."""
    b, w = layer.sigma_b2, layer.omega_v2
    k11 = np.asarray(m.k11)
    k22 = np.asarray(m.k22)
    return KernelMoments(
        b + w * activation_moment(activation, KernelMoments(k11, k11, k11)),
        b + w * activation_moment(activation, m),
        b + w * activation_moment(activation, KernelMoments(k22, k22, k22)),
    )


def deep_moments(spec: BaseKernelSpec, layers, X1, X2=None, depth: int | None = None) -> KernelMoments:
    """Moments after ``depth`` recursion steps (default: all of ``layers``).

    Diagonal recursions are carried per input, so a full n1 x n2 block costs
    O(n1 + n2) diagonal passes plus O(n1 * n2) cross evaluations.
    """
    layers = tuple(layers)
    depth = len(layers) if depth is None else depth
    if depth < 0 or depth > len(layers):
        raise InputError(f"depth {depth} needs {depth} layer specs, have {len(layers)}")
    m = input_moments(spec, X1, X2)
    for layer in layers[:depth]:
        m = layer_step(spec.activation, layer, m)
    return m


def deep_k(x1, x2, spec: BaseKernelSpec, layers, depth: int) -> KernelMoments:
    """Scalar moments ``(K^L(x1,x1), K^L(x1,x2), K^L(x2,x2))`` at depth ``L``.

    ``L = 0`` gives the :func:`k0` moments; level ``l >= 1`` applies
    ``layers[l - 1]``.
    """
    x1 = np.ravel(np.asarray(x1, dtype=float))
    x2 = np.ravel(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise DimensionMismatch(f"inputs have dimensions {x1.size} and {x2.size}")
    m = deep_moments(spec, layers, x1[None, :], x2[None, :], depth)
    return KernelMoments(float(m.k11[0, 0]), float(m.k12[0, 0]), float(m.k22[0, 0]))


def mc_h_product(x1, x2, activation: str, sigma_u, n_samples: int = 10**6, seed: int = 0,
                 chunk_size: int = 1 << 16):
    """Monte Carlo estimate of ``E[h(x1 . u) h(x2 . u)]`` with ``u ~ N(0, diag(sigma_u))``.

    Chunk ``c`` draws from the stream seeded by ``(seed, c)``, so the result
    only depends on ``seed`` and ``n_samples``.

    Returns:
        ``(estimate, std_error)``.
    """
    if n_samples < 10**4:
        raise InputError("mc_h_product needs n_samples >= 1e4")
    x1 = np.ravel(np.asarray(x1, dtype=float))
    x2 = np.ravel(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise DimensionMismatch(f"inputs have dimensions {x1.size} and {x2.size}")
    scale = np.sqrt(np.broadcast_to(np.asarray(sigma_u, dtype=float), x1.shape))
    h = activation_fn(activation)
    P = np.stack([x1 * scale, x2 * scale], axis=1)
    acc = MomentAccumulator(1)
    for c, start in enumerate(range(0, n_samples, chunk_size)):
        n = min(chunk_size, n_samples - start)
        z = np.random.default_rng([seed, c]).standard_normal((n, x1.size)) @ P
        acc.update(h(z[:, 0]) * h(z[:, 1]))
    return float(acc.mean[0]), float(acc.std_error[0])
