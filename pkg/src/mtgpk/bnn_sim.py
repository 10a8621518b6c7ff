"""Finite-width multitask Bayesian network priors and their empirical moments.

Three architectures are sampled:

* :class:`SingleLayerNet` -- shared hidden layer, task-correlated output
  weights ``v_j ~ N(0, Omega / H)`` and output biases ``b ~ N(0, C * Omega)``.
* :class:`DeepNet` -- task-independent hidden layers with weight variance
  ``omega_v2 / N_l`` and bias variance ``sigma_b2``, then a task-correlated
  last layer.
* :class:`AdaptiveNet` -- K basis networks whose features are mixed per task;
  the output weights of unit ``j`` over (basis, task) pairs are jointly
  ``N(0, grid / H)``.

Each draw ``i`` of :func:`empirical_moments` uses its own random stream keyed
on ``(seed, i)``, and per-chunk accumulators are merged in chunk order, so
results are identical for any number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .base_kernels import activation_fn
from .core import BaseKernelSpec, CcSpec, DeepMtSpec, IcmSpec, LmcSpec, TaskCovariance
from .errors import DimensionMismatch, InputError
from .gp_engine import factorize
from .multitask_kernels import kernel_matrix
from .stats import MomentAccumulator

CHUNK_DRAWS = 256


@dataclass(frozen=True)
class SingleLayerNet:
    width: int
    base: BaseKernelSpec
    task_cov: TaskCovariance

    @property
    def n_tasks(self):
        return self.task_cov.n_tasks


@dataclass(frozen=True)
class DeepNet:
    widths: tuple
    base: BaseKernelSpec
    layers: tuple
    task_cov: TaskCovariance
    bias_task_cov: TaskCovariance

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.widths) != len(self.layers) + 1:
            raise InputError(f"{len(self.widths)} widths for {len(self.layers) + 1} hidden layers")

    @property
    def n_tasks(self):
        return self.task_cov.n_tasks


@dataclass(frozen=True)
class AdaptiveNet:
    width: int
    bases: tuple
    grid: TaskCovariance
    n_tasks: int

    def __post_init__(self):
        object.__setattr__(self, "bases", tuple(self.bases))
        if self.grid.n_tasks != len(self.bases) * self.n_tasks:
            raise DimensionMismatch("grid size must be (number of bases) * (number of tasks)")


def _check_widths(net):
    widths = net.widths if isinstance(net, DeepNet) else (net.width,)
    if any(w < 1 for w in widths):
        raise InputError(f"widths must be >= 1, got {widths}")


def network_for(spec, width: int):
    """Finite-width network whose infinite-width limit is ``spec``."""
    if isinstance(spec, IcmSpec):
        net = SingleLayerNet(width, spec.base, spec.task_cov)
    elif isinstance(spec, DeepMtSpec):
        net = DeepNet((width,) * spec.depth, spec.base, spec.layers, spec.task_cov, spec.bias_task_cov)
    elif isinstance(spec, LmcSpec):
        cc = spec.to_cc()
        net = AdaptiveNet(width, cc.bases, cc.grid, cc.n_tasks)
    elif isinstance(spec, CcSpec):
        net = AdaptiveNet(width, spec.bases, spec.grid, spec.n_tasks)
    else:
        raise InputError(f"not a kernel spec: {type(spec).__name__}")
    _check_widths(net)
    return net


def limit_kernel(net):
    """Inverse of :func:`network_for`."""
    if isinstance(net, SingleLayerNet):
        return IcmSpec(net.base, net.task_cov)
    if isinstance(net, DeepNet):
        return DeepMtSpec(net.base, net.layers, net.task_cov, net.bias_task_cov)
    if isinstance(net, AdaptiveNet):
        return CcSpec(net.bases, net.grid, net.n_tasks)
    raise InputError(f"not a network spec: {type(net).__name__}")


# ------------------------------------------------------------ sampling


@dataclass(frozen=True, eq=False)
class HiddenLayer:
    """``pre = b + scale * (inputs @ W.T)``; ``inputs`` are the raw rows,
    prefixed by a constant 1 when ``augment`` is set."""

    W: np.ndarray
    b: np.ndarray
    scale: float
    activation: str
    augment: bool = False

    def __call__(self, inputs):
        if self.augment:
            inputs = np.column_stack([np.ones(len(inputs)), inputs])
        return activation_fn(self.activation)(self.b + self.scale * (inputs @ self.W.T))


@dataclass(frozen=True, eq=False)
class NetworkSample:
    """Drawn weights. ``hidden[k]`` is the list of layers of feature path
    ``k`` (one path, or one per basis for adaptive networks); ``V[k]`` maps
    its last features to the T outputs and ``b`` is the output bias."""

    hidden: tuple
    V: tuple
    b: np.ndarray
    dim: int = field(default=0)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _input_layer(base: BaseKernelSpec, width: int, d: int, rng) -> HiddenLayer:
    var = base.sigma_u_vector(d)
    augment = base.input_bias_var > 0
    if augment:
        var = np.r_[base.input_bias_var, var]
    W = rng.standard_normal((width, len(var))) * np.sqrt(var)
    b = rng.standard_normal(width) * math.sqrt(base.sigma_b2) if base.sigma_b2 > 0 else np.zeros(width)
    return HiddenLayer(W, b, math.sqrt(base.omega_v2), base.activation, augment)


def _correlated_rows(tc: TaskCovariance, n_rows: int, scale: float, rng) -> np.ndarray:
    """``n_rows`` independent rows distributed as ``N(0, scale * tc.matrix)``."""
    return (rng.standard_normal((n_rows, tc.n_tasks)) @ tc.factor.T) * math.sqrt(scale)


def sample_network(net, seed, dim: int) -> NetworkSample:
    """Draw every weight and bias of ``net`` for ``dim``-dimensional inputs."""
    _check_widths(net)
    rng = _rng(seed)
    if isinstance(net, SingleLayerNet):
        H = net.width
        layer = _input_layer(net.base, H, dim, rng)
        V = _correlated_rows(net.task_cov, H, 1.0 / H, rng)
        C = net.base.bias_const
        b = _correlated_rows(net.task_cov, 1, C, rng)[0] if C > 0 else np.zeros(net.n_tasks)
        return NetworkSample(((layer,),), (V,), b, dim)
    if isinstance(net, DeepNet):
        layers = [_input_layer(net.base, net.widths[0], dim, rng)]
        for spec, n_in, n_out in zip(net.layers, net.widths[:-1], net.widths[1:]):
            W = rng.standard_normal((n_out, n_in))
            b = rng.standard_normal(n_out) * math.sqrt(spec.sigma_b2) if spec.sigma_b2 > 0 else np.zeros(n_out)
            layers.append(HiddenLayer(W, b, math.sqrt(spec.omega_v2 / n_in), net.base.activation))
        V = _correlated_rows(net.task_cov, net.widths[-1], 1.0 / net.widths[-1], rng)
        b = _correlated_rows(net.bias_task_cov, 1, 1.0, rng)[0]
        return NetworkSample((tuple(layers),), (V,), b, dim)
    if isinstance(net, AdaptiveNet):
        H, K, T = net.width, len(net.bases), net.n_tasks
        paths = tuple((_input_layer(base, H, dim, rng),) for base in net.bases)
        G = _correlated_rows(net.grid, H, 1.0 / H, rng).reshape(H, K, T)
        V = tuple(G[:, k, :] for k in range(K))
        return NetworkSample(paths, V, np.zeros(T), dim)
    raise InputError(f"not a network spec: {type(net).__name__}")


def forward(sample: NetworkSample, X) -> np.ndarray:
    """Outputs of all T tasks; ``(n, T)`` for a matrix of inputs, ``(T,)`` for one input."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != sample.dim:
        raise DimensionMismatch(f"network expects d={sample.dim}, got {X.shape[1]}")
    out = np.broadcast_to(sample.b, (len(X), len(sample.b))).copy()
    for path, V in zip(sample.hidden, sample.V):
        h = X
        for layer in path:
            h = layer(h)
        out += h @ V
    return out[0] if single else out


def _sqrt_psd(S):
    w, q = np.linalg.eigh(0.5 * (S + S.T))
    return q * np.sqrt(np.clip(w, 0.0, None))


def _deep_probe_outputs(net: DeepNet, X, tasks, rng):
    """Outputs of one deep network at the probe rows only.

    The input layer is drawn explicitly. For every later hidden layer the
    pre-activations of its units at the s probes are, given the previous
    layer's features ``h``, i.i.d. ``N(0, sigma_b2 + omega_v2 / N * h^T h)``;
    drawing them that way has the same joint law as drawing the N_out x N_in
    weight matrix, at O(N s^2) instead of O(N_out N_in) cost.
    """
    h = _input_layer(net.base, net.widths[0], X.shape[1], rng)(X)
    act = activation_fn(net.base.activation)
    for spec, n_in, n_out in zip(net.layers, net.widths[:-1], net.widths[1:]):
        S = spec.sigma_b2 + (spec.omega_v2 / n_in) * (h @ h.T)
        h = act(_sqrt_psd(S) @ rng.standard_normal((len(X), n_out)))
    n_last = net.widths[-1]
    V = _correlated_rows(net.task_cov, n_last, 1.0 / n_last, rng)
    b = _correlated_rows(net.bias_task_cov, 1, 1.0, rng)[0]
    return b[tasks] + np.einsum("sh,hs->s", h, V[:, tasks])


def probe_outputs(net, X, tasks, rng, exact_weights: bool = False) -> np.ndarray:
    """``[f_{t_1}(x_1), ..., f_{t_s}(x_s)]`` for one freshly drawn network."""
    if isinstance(net, DeepNet) and not exact_weights:
        return _deep_probe_outputs(net, X, tasks, rng)
    out = forward(sample_network(net, rng, X.shape[1]), X)
    return out[np.arange(len(X)), tasks]


@dataclass(frozen=True, eq=False)
class EmpiricalMoments:
    X: np.ndarray
    tasks: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    n_draws: int
    seed: object
    samples: np.ndarray | None = None

    @property
    def mean_std_error(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None) / self.n_draws)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MTGPK_THREADS", "1")))
    except ValueError:
        return 1


def _seed_key(seed):
    return list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]


def empirical_moments(net, X, tasks, n_draws: int, seed=0, workers: int | None = None,
                      keep_samples: bool = False, exact_weights: bool = False) -> EmpiricalMoments:
    """Sample mean and covariance of the joint outputs at ``(X[i], tasks[i])``."""
    if n_draws < 1000:
        raise InputError("empirical_moments needs n_draws >= 1000")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tasks = np.asarray(tasks, dtype=np.int64).ravel()
    if len(tasks) != len(X):
        raise DimensionMismatch("one task label per probe point is required")
    if np.any(tasks < 0) or np.any(tasks >= net.n_tasks):
        raise InputError("probe task index out of range")
    _check_widths(net)
    key = _seed_key(seed)
    s = len(X)

    def run_chunk(start):
        stop = min(start + CHUNK_DRAWS, n_draws)
        out = np.empty((stop - start, s))
        for r, i in enumerate(range(start, stop)):
            out[r] = probe_outputs(net, X, tasks, np.random.default_rng(key + [i]), exact_weights)
        return out

    starts = range(0, n_draws, CHUNK_DRAWS)
    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_chunk, starts))
    else:
        chunks = [run_chunk(st) for st in starts]
    acc = MomentAccumulator(s)
    for c in chunks:
        acc.merge(MomentAccumulator(s).update(c))
    samples = np.concatenate(chunks) if keep_samples else None
    return EmpiricalMoments(X, tasks, acc.mean, acc.cov, n_draws, seed, samples)


def standardized_shape(samples):
    """``(skewness, kurtosis)`` of a 1-D sample; kurtosis is 3 for a Gaussian."""
    samples = np.asarray(samples, dtype=float)
    return float(scipy.stats.skew(samples)), float(scipy.stats.kurtosis(samples, fisher=False))


# ------------------------------------------------------- convergence study


def relative_frobenius(A, B) -> float:
    return float(np.linalg.norm(A - B) / np.linalg.norm(B))


@dataclass
class ConvergenceRow:
    width: int
    rel_frobenius: float
    max_abs_dev: float
    bootstrap_se: float
    max_mean_z: float


@dataclass
class ConvergenceReport:
    kernel: np.ndarray
    X: np.ndarray
    tasks: np.ndarray
    n_draws: int
    seed: int
    rows: list
    monotone: bool | None
    monotone_reason: str

    @property
    def passed(self) -> bool:
        return self.monotone is not False

    def to_dict(self) -> dict:
        return {
            "points": [{"x": [float(v) for v in x], "task": int(t)} for x, t in zip(self.X, self.tasks)],
            "kernel": [[float(v) for v in row] for row in self.kernel],
            "n_draws": self.n_draws,
            "seed": self.seed,
            "widths": [
                {"width": r.width, "rel_frobenius": r.rel_frobenius, "max_abs_dev": r.max_abs_dev,
                 "bootstrap_se": r.bootstrap_se, "max_mean_z": r.max_mean_z}
                for r in self.rows
            ],
            "monotone": self.monotone,
            "monotone_reason": self.monotone_reason,
            "pass": self.passed,
        }


def bootstrap_deviation_se(samples, K, n_boot: int, seed) -> float:
    rng = np.random.default_rng(seed)
    n = len(samples)
    devs = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, n)
        devs[b] = relative_frobenius(np.cov(samples[idx], rowvar=False), K)
    return float(np.std(devs, ddof=1))


def check_monotone(rows, band: float = 4.0):
    """Non-increasing deviations, tolerating one inversion within ``band`` bootstrap SEs."""
    if len(rows) < 2:
        return None, "single width: monotonicity check skipped"
    inversions = []
    for a, b in zip(rows[:-1], rows[1:]):
        if b.rel_frobenius > a.rel_frobenius:
            inversions.append((a, b))
    if not inversions:
        return True, "deviation non-increasing over all widths"
    if len(inversions) == 1:
        a, b = inversions[0]
        tol = band * max(a.bootstrap_se, b.bootstrap_se)
        if b.rel_frobenius - a.rel_frobenius <= tol:
            return True, f"one inversion {a.width}->{b.width} within {band:g} bootstrap SE"
        return False, f"inversion {a.width}->{b.width} exceeds {band:g} bootstrap SE"
    return False, f"{len(inversions)} inversions across the width sweep"


def _max_mean_z(em) -> float:
    # a probe with zero output variance has an exactly zero mean; score it 0
    se = em.mean_std_error
    z = np.divide(np.abs(em.mean), se, out=np.where(em.mean == 0, 0.0, np.inf), where=se > 0)
    return float(np.max(z))


def convergence_study(spec, widths, X, tasks, n_draws: int, seed: int = 0, workers: int | None = None,
                      n_boot: int = 200) -> ConvergenceReport:
    """Empirical vs analytic covariance of the finite networks limiting to ``spec``.

    Width ``widths[k]`` uses draw streams ``(seed, k, i)``.
    """
    widths = [int(w) for w in widths]
    if widths != sorted(widths):
        raise InputError("widths must be ascending")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tasks = np.asarray(tasks, dtype=np.int64)
    K = kernel_matrix(spec, X, tasks)
    rows = []
    for k, w in enumerate(widths):
        em = empirical_moments(network_for(spec, w), X, tasks, n_draws, (seed, k), workers, keep_samples=True)
        diff = em.cov - K
        rows.append(ConvergenceRow(
            width=w,
            rel_frobenius=relative_frobenius(em.cov, K),
            max_abs_dev=float(np.max(np.abs(diff))),
            bootstrap_se=bootstrap_deviation_se(em.samples, K, n_boot, [seed, k, 1 << 20]),
            max_mean_z=_max_mean_z(em),
        ))
    monotone, reason = check_monotone(rows)
    return ConvergenceReport(K, X, tasks, n_draws, seed, rows, monotone, reason)


def sample_gp_prior(spec, X, tasks, seed) -> np.ndarray:
    """One draw from ``N(0, K)`` over the points, via the jittered Cholesky factor."""
    K = kernel_matrix(spec, X, tasks)
    L = factorize(K).L
    return L @ np.random.default_rng(seed).standard_normal(len(K))
