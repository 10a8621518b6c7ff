"""Domain types shared across the package: task covariances, kernel
descriptions and datasets, plus CSV dataset I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    InputError,
    NonFiniteValue,
    NonPositiveDiagonal,
    NotPSD,
    NotSymmetric,
    ParseError,
    TaskIndexOutOfRange,
)

ACTIVATIONS = ("erf", "relu", "linear")

SYMMETRY_ATOL = 1e-12
PSD_RTOL = 1e-10


def _frozen_array(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def validate_task_cov(tc):
    """Check a task covariance and return its matrix.

    ``tc`` is either a :class:`TaskCovariance` (the matrix is rebuilt from
    its factor) or a square matrix supplied directly for checking.

    Raises:
        NotSymmetric: if the matrix is asymmetric beyond 1e-12 absolute.
        NotPSD: if an eigenvalue is below ``-1e-10 * max|Omega|``.
        NonPositiveDiagonal: if some diagonal entry is not strictly positive.
    """
    if isinstance(tc, TaskCovariance):
        omega = tc.factor @ tc.factor.T
    else:
        omega = np.asarray(tc, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1] or omega.shape[0] == 0:
        raise DimensionMismatch(f"task covariance must be a non-empty square matrix, got shape {omega.shape}")
    if not np.all(np.isfinite(omega)):
        raise NonFiniteValue("task covariance has non-finite entries")
    asym = np.max(np.abs(omega - omega.T))
    if asym > SYMMETRY_ATOL:
        raise NotSymmetric(f"task covariance asymmetric by {asym:.3g}")
    omega = 0.5 * (omega + omega.T)
    eig_min = np.linalg.eigvalsh(omega)[0]
    scale = np.max(np.abs(omega))
    if eig_min < -PSD_RTOL * scale:
        raise NotPSD(eig_min)
    diag = np.diag(omega)
    if np.any(diag <= 0):
        raise NonPositiveDiagonal(f"diagonal entries must be > 0, got {diag.tolist()}")
    return omega


def _psd_lower_factor(omega):
    """Lower-triangular L with L L^T = omega, also for singular PSD input."""
    try:
        return np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        pass
    w, q = np.linalg.eigh(omega)
    a = q * np.sqrt(np.clip(w, 0.0, None))
    # a a^T = omega; with a^T = Q R we get omega = R^T R and R^T is lower.
    r = np.linalg.qr(a.T, mode="r")
    lower = r.T
    signs = np.where(np.diag(lower) < 0, -1.0, 1.0)
    return lower * signs


@dataclass(frozen=True, eq=False)
class TaskCovariance:
    """T x T coregionalization matrix stored through a lower-triangular factor.

    ``matrix`` is ``factor @ factor.T``, symmetrized, so it is PSD by
    construction. Use :meth:`from_matrix` to start from an explicit matrix.
    """

    factor: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.factor, dtype=float)
        if f.ndim != 2 or f.shape[0] != f.shape[1] or f.shape[0] == 0:
            raise DimensionMismatch(f"factor must be a non-empty square matrix, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise NonFiniteValue("task covariance factor has non-finite entries")
        if np.any(np.triu(f, 1) != 0):
            raise InputError("task covariance factor must be lower-triangular")
        object.__setattr__(self, "factor", _frozen_array(f))
        validate_task_cov(self)

    @classmethod
    def from_matrix(cls, omega) -> "TaskCovariance":
        omega = validate_task_cov(omega)
        return cls(_psd_lower_factor(omega))

    @classmethod
    def identity(cls, n_tasks: int) -> "TaskCovariance":
        return cls(np.eye(n_tasks))

    @classmethod
    def diagonal(cls, variances) -> "TaskCovariance":
        return cls(np.diag(np.sqrt(np.asarray(variances, dtype=float))))

    @property
    def n_tasks(self) -> int:
        return self.factor.shape[0]

    @cached_property
    def matrix(self) -> np.ndarray:
        m = self.factor @ self.factor.T
        return _frozen_array(0.5 * (m + m.T))

    def scaled(self, c: float) -> "TaskCovariance":
        return TaskCovariance(self.factor * math.sqrt(c))

    def restrict(self, task: int) -> "TaskCovariance":
        return TaskCovariance([[math.sqrt(self.matrix[task, task])]])

    def is_diagonal(self) -> bool:
        m = self.matrix
        return bool(np.all(m[~np.eye(len(m), dtype=bool)] == 0))


@dataclass(frozen=True)
class BaseKernelSpec:
    """Hidden-layer description shared by kernels and network samplers.

    The pre-activation of a hidden unit at input ``x`` is
    ``b0 + sqrt(omega_v2) * (u0 + u . x)`` with ``u ~ N(0, diag(sigma_u))``,
    ``b0 ~ N(0, sigma_b2)`` and ``u0 ~ N(0, input_bias_var)``. The ``u0``
    term is the constant-1 input coordinate; ``input_bias_var`` defaults to
    1.0 for erf (so the kernel does not degenerate at ``x = 0``) and to 0
    otherwise. Set it to 0 to disable the augmentation.

    ``bias_const`` is the output-bias constant C of the single-layer
    multitask network (``Cov(b_t1, b_t2) = C * Omega[t1, t2]``).
    """

    activation: str
    sigma_u: Union[float, tuple] = 1.0
    sigma_b2: float = 0.0
    omega_v2: float = 1.0
    bias_const: float = 0.0
    input_bias_var: float | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if np.ndim(self.sigma_u) == 0:
            su = float(self.sigma_u)
        else:
            su = tuple(float(v) for v in np.ravel(self.sigma_u))
            if not su:
                raise DimensionMismatch("sigma_u vector is empty")
        object.__setattr__(self, "sigma_u", su)
        if self.input_bias_var is None:
            object.__setattr__(self, "input_bias_var", 1.0 if self.activation == "erf" else 0.0)
        for name in ("sigma_b2", "omega_v2", "bias_const", "input_bias_var"):
            object.__setattr__(self, name, float(getattr(self, name)))
        values = np.r_[np.ravel(self.sigma_u), self.sigma_b2, self.omega_v2, self.bias_const, self.input_bias_var]
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue(f"non-finite hyperparameter in {self}")
        if np.any(np.ravel(self.sigma_u) <= 0):
            raise InputError("sigma_u entries must be > 0")
        if self.omega_v2 <= 0:
            raise InputError("omega_v2 must be > 0")
        if self.sigma_b2 < 0 or self.bias_const < 0 or self.input_bias_var < 0:
            raise InputError("sigma_b2, bias_const and input_bias_var must be >= 0")

    def sigma_u_vector(self, d: int) -> np.ndarray:
        if isinstance(self.sigma_u, float):
            return np.full(d, self.sigma_u)
        if len(self.sigma_u) != d:
            raise DimensionMismatch(f"sigma_u has {len(self.sigma_u)} entries but inputs have d={d}")
        return np.asarray(self.sigma_u)

    def scaled_inputs(self, X) -> np.ndarray:
        """Rows ``x~`` such that ``x~_1 . x~_2 = input_bias_var + x_1^T Sigma_u x_2``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xs = X * np.sqrt(self.sigma_u_vector(X.shape[1]))
        if self.input_bias_var > 0:
            Xs = np.column_stack([np.full(len(Xs), math.sqrt(self.input_bias_var)), Xs])
        return Xs


@dataclass(frozen=True)
class LayerSpec:
    """Bias and weight variances of one task-independent hidden layer."""

    sigma_b2: float = 0.0
    omega_v2: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma_b2) and math.isfinite(self.omega_v2)):
            raise NonFiniteValue("layer variances must be finite")
        if self.sigma_b2 < 0 or self.omega_v2 <= 0:
            raise InputError("layer needs sigma_b2 >= 0 and omega_v2 > 0")


def _check_same_tasks(covs):
    sizes = {c.n_tasks for c in covs}
    if len(sizes) != 1:
        raise DimensionMismatch(f"task covariances disagree on the number of tasks: {sorted(sizes)}")
    return sizes.pop()


@dataclass(frozen=True)
class IcmSpec:
    base: BaseKernelSpec
    task_cov: TaskCovariance

    @property
    def n_tasks(self) -> int:
        return self.task_cov.n_tasks


@dataclass(frozen=True)
class DeepMtSpec:
    """Deep multitask kernel with ``depth = len(layers) + 1`` hidden layers.

    ``base`` describes the input layer (its ``bias_const`` is unused), each
    entry of ``layers`` one further task-independent hidden layer, and the
    last layer is task dependent through ``task_cov`` (output weights) and
    ``bias_task_cov`` (output biases).
    """

    base: BaseKernelSpec
    layers: tuple
    task_cov: TaskCovariance
    bias_task_cov: TaskCovariance

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        _check_same_tasks([self.task_cov, self.bias_task_cov])

    @property
    def depth(self) -> int:
        return len(self.layers) + 1

    @property
    def n_tasks(self) -> int:
        return self.task_cov.n_tasks


@dataclass(frozen=True)
class LmcComponent:
    """One ``K_task^m * K_input^m`` term. Non-empty ``layers`` make the input
    kernel a deep recursion (an extension; the single-layer case is the
    derived one)."""

    base: BaseKernelSpec
    task_cov: TaskCovariance
    layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class LmcSpec:
    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InputError("LMC needs at least one component")
        object.__setattr__(self, "components", comps)
        _check_same_tasks([c.task_cov for c in comps])

    @property
    def n_tasks(self) -> int:
        return self.components[0].task_cov.n_tasks

    def to_cc(self) -> "CcSpec":
        """The CC kernel whose block grid is block-diagonal with these task covariances."""
        if any(c.layers for c in self.components):
            raise InputError("only single-layer LMC components have a CC counterpart")
        grid = TaskCovariance(scipy.linalg.block_diag(*[c.task_cov.factor for c in self.components]))
        return CcSpec(tuple(c.base for c in self.components), grid, self.n_tasks)


@dataclass(frozen=True)
class CcSpec:
    """Cross-coregionalization kernel.

    ``grid`` is the (K*T) x (K*T) covariance of the output weights over
    (basis, task) pairs; block ``(m, n)`` is the T x T matrix coupling basis
    ``m`` with basis ``n``. Storing the whole grid through one factor keeps
    it a valid joint covariance.
    """

    bases: tuple
    grid: TaskCovariance
    n_tasks: int

    def __post_init__(self):
        object.__setattr__(self, "bases", tuple(self.bases))
        if not self.bases:
            raise InputError("CC needs at least one basis")
        if self.grid.n_tasks != len(self.bases) * self.n_tasks:
            raise DimensionMismatch(
                f"grid is {self.grid.n_tasks}x{self.grid.n_tasks}, expected "
                f"{len(self.bases) * self.n_tasks} for {len(self.bases)} bases and {self.n_tasks} tasks"
            )

    @classmethod
    def from_blocks(cls, bases, blocks) -> "CcSpec":
        blocks = [[np.asarray(b, dtype=float) for b in row] for row in blocks]
        n_tasks = blocks[0][0].shape[0]
        return cls(tuple(bases), TaskCovariance.from_matrix(np.block(blocks)), n_tasks)

    def block(self, m: int, n: int) -> np.ndarray:
        T = self.n_tasks
        return self.grid.matrix[m * T:(m + 1) * T, n * T:(n + 1) * T]


KernelSpec = Union[IcmSpec, DeepMtSpec, LmcSpec, CcSpec]


def check_task_index(t, n_tasks: int):
    t = np.asarray(t)
    if t.size and (np.any(t < 0) or np.any(t >= n_tasks)):
        raise TaskIndexOutOfRange(f"task index out of range [0, {n_tasks}): {np.unique(t).tolist()}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs ``X`` (N x d), integer task labels, targets and per-task noise variances."""

    X: np.ndarray
    tasks: np.ndarray
    y: np.ndarray
    noise_vars: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        tasks = np.asarray(self.tasks)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DimensionMismatch(f"X must be N x d with N, d >= 1, got shape {X.shape}")
        if tasks.shape != (len(X),) or y.shape != (len(X),):
            raise DimensionMismatch(f"X has {len(X)} rows but tasks/y have {tasks.shape}/{y.shape}")
        if tasks.dtype.kind == "f":
            if np.any(tasks != np.round(tasks)):
                raise InputError("task labels must be integers")
        tasks = tasks.astype(np.int64)
        if np.any(tasks < 0):
            raise TaskIndexOutOfRange("task labels must be non-negative")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NonFiniteValue("dataset contains NaN or Inf")
        if self.noise_vars is None:
            noise = np.zeros(int(tasks.max()) + 1)
        else:
            noise = np.asarray(self.noise_vars, dtype=float).ravel()
        if not np.all(np.isfinite(noise)) or np.any(noise < 0):
            raise NonFiniteValue(f"noise variances must be finite and >= 0, got {noise.tolist()}")
        check_task_index(tasks, len(noise))
        object.__setattr__(self, "X", _frozen_array(X))
        object.__setattr__(self, "tasks", _frozen_array(tasks, np.int64))
        object.__setattr__(self, "y", _frozen_array(y))
        object.__setattr__(self, "noise_vars", _frozen_array(noise))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_tasks(self) -> int:
        return len(self.noise_vars)

    def with_noise(self, noise_vars) -> "Dataset":
        return Dataset(self.X, self.tasks, self.y, noise_vars)

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.tasks[rows], self.y[rows], self.noise_vars)

    def task_rows(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.tasks == t)


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as a number", row, column) from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"row {row}, column {column!r}: non-finite value {text!r}")
    return value


def load_dataset(path, noise_vars: Sequence[float] | None = None) -> Dataset:
    """Read a dataset CSV with header ``x0,...,x{d-1},task,y``.

    The task count is ``max(task) + 1`` unless ``noise_vars`` is given, in
    which case it is ``len(noise_vars)``. Without ``noise_vars`` all noise
    variances are zero.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 2
    expected = [f"x{j}" for j in range(d)] + ["task", "y"]
    if d < 1 or header != expected:
        raise ParseError(f"{path}: header must be {','.join(expected) if d >= 1 else 'x0,...,task,y'}, got {','.join(header)}", 1)
    if len(rows) == 1:
        raise ParseError(f"{path}: no data rows", 2)
    X = np.empty((len(rows) - 1, d))
    tasks = np.empty(len(rows) - 1, dtype=np.int64)
    y = np.empty(len(rows) - 1)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 2:
            raise DimensionMismatch(f"{path}: row {lineno} has {len(row)} fields, expected {d + 2}")
        for j in range(d):
            X[i, j] = _parse_float(row[j], lineno, header[j])
        t = row[d].strip()
        if not t.isdigit():
            raise ParseError(f"task must be a non-negative integer, got {t!r}", lineno, "task")
        tasks[i] = int(t)
        y[i] = _parse_float(row[d + 1], lineno, "y")
    if noise_vars is not None and len(noise_vars) < tasks.max() + 1:
        raise TaskIndexOutOfRange(f"{path}: task {tasks.max()} present but only {len(noise_vars)} noise variances given")
    return Dataset(X, tasks, y, noise_vars)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["task", "y"])
        for x, t, y in zip(ds.X, ds.tasks, ds.y):
            w.writerow([f"{v:.17g}" for v in x] + [int(t), f"{y:.17g}"])
