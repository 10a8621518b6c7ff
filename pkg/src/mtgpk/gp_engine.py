"""Exact multitask GP regression: factorization, posterior prediction,
evidence and hyperparameter search."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .core import (
    BaseKernelSpec,
    CcSpec,
    Dataset,
    DeepMtSpec,
    IcmSpec,
    LayerSpec,
    LmcComponent,
    LmcSpec,
    TaskCovariance,
    check_task_index,
)
from .errors import EmptyTask, InputError, InvalidBounds, NotPSDAfterJitter, NumericalError
from .multitask_kernels import GramMatrix, gram, kernel_matrix

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
VARIANCE_CLAMP = 1e-10


@dataclass(frozen=True, eq=False)
class Factorization:
    L: np.ndarray
    jitter: float

    def solve(self, b):
        return scipy.linalg.cho_solve((self.L, True), b, check_finite=False)

    def half_solve(self, b):
        return scipy.linalg.solve_triangular(self.L, b, lower=True, check_finite=False)

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def factorize(g) -> Factorization:
    """Cholesky factor of a (noisy) Gram matrix with escalating jitter.

    The plain matrix is tried first; on failure ``j * mean(diag)`` is added
    for ``j = 1e-10, 1e-9, ..., 1e-4``. The applied jitter is recorded.
    """
    K = g.K if isinstance(g, GramMatrix) else np.asarray(g, dtype=float)
    if not np.all(np.isfinite(K)):
        raise NotPSDAfterJitter(0.0, "Gram matrix has non-finite entries")
    scale = float(np.mean(np.diag(K)))
    if not scale > 0:
        scale = 1.0
    jitter = 0.0
    rel = JITTER_START
    eye = np.eye(len(K))
    while True:
        try:
            L = scipy.linalg.cholesky(K + jitter * eye, lower=True, check_finite=False)
            if jitter:
                log.debug("Cholesky needed jitter %.3g", jitter)
            return Factorization(L, jitter)
        except np.linalg.LinAlgError:
            pass
        if rel > JITTER_MAX * (1 + 1e-9):
            raise NotPSDAfterJitter(JITTER_MAX * scale)
        jitter = rel * scale
        rel *= 10.0


@dataclass(frozen=True)
class PosteriorResult:
    mean: float
    variance: float
    includes_noise: bool


def _clamp_variance(var, prior):
    tol = VARIANCE_CLAMP * np.maximum(1.0, np.abs(prior))
    if np.any(var < -tol):
        raise NumericalError(f"posterior variance {np.min(var):.3g} is negative beyond round-off")
    return np.maximum(var, 0.0)


class MultitaskGP:
    """A dataset conditioned on a kernel: one factorization, many queries."""

    def __init__(self, ds: Dataset, spec):
        check_task_index(ds.tasks, spec.n_tasks)
        self.ds = ds
        self.spec = spec
        self.factor = factorize(gram(ds, spec, add_noise=True))
        self.alpha = self.factor.solve(ds.y)

    def cross(self, X_star, t_star) -> np.ndarray:
        X_star = np.asarray(X_star, dtype=float)
        if X_star.ndim == 1:
            X_star = X_star[None, :]
        t_star = np.broadcast_to(np.asarray(t_star, dtype=np.int64), (len(X_star),))
        return kernel_matrix(self.spec, X_star, t_star, self.ds.X, self.ds.tasks)

    def predict(self, X_star, t_star, include_noise: bool = True):
        """Posterior means and variances at rows of ``X_star`` for tasks ``t_star``."""
        X_star = np.asarray(X_star, dtype=float)
        if X_star.ndim == 1:
            X_star = X_star[None, :]
        t_star = np.broadcast_to(np.asarray(t_star, dtype=np.int64), (len(X_star),))
        check_task_index(t_star, self.spec.n_tasks)
        Ks = kernel_matrix(self.spec, X_star, t_star, self.ds.X, self.ds.tasks)
        mean = Ks @ self.alpha
        prior = np.array([kernel_matrix(self.spec, x[None, :], [t])[0, 0] for x, t in zip(X_star, t_star)])
        if include_noise:
            prior = prior + self.ds.noise_vars[t_star]
        v = self.factor.half_solve(Ks.T)
        var = prior - np.einsum("ij,ij->j", v, v)
        return mean, _clamp_variance(var, prior)

    def log_marginal(self) -> float:
        n = self.ds.n
        return float(-0.5 * self.ds.y @ self.alpha - 0.5 * self.factor.logdet - 0.5 * n * math.log(2 * math.pi))


def predict(ds: Dataset, spec, x_star, t_star: int, include_noise: bool = True) -> PosteriorResult:
    mean, var = MultitaskGP(ds, spec).predict(np.atleast_1d(x_star)[None, :], [t_star], include_noise)
    return PosteriorResult(float(mean[0]), float(var[0]), include_noise)


def predictive_mean_weights(ds: Dataset, spec) -> np.ndarray:
    """``alpha = C_N^{-1} y``; the posterior mean at ``(x*, t*)`` is ``sum_i K_{t* t_i}(x*, x_i) alpha_i``."""
    return MultitaskGP(ds, spec).alpha


def log_marginal(ds: Dataset, spec) -> float:
    return MultitaskGP(ds, spec).log_marginal()


class PerTaskBaseline:
    """Independent single-task GPs, one per task, each on its own rows only."""

    def __init__(self, models):
        self.models = list(models)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, t):
        return self.models[t]

    def predict(self, X_star, t_star, include_noise: bool = True):
        X_star = np.asarray(X_star, dtype=float)
        if X_star.ndim == 1:
            X_star = X_star[None, :]
        t_star = np.broadcast_to(np.asarray(t_star, dtype=np.int64), (len(X_star),))
        check_task_index(t_star, len(self.models))
        mean = np.empty(len(X_star))
        var = np.empty(len(X_star))
        for t in np.unique(t_star):
            rows = t_star == t
            mean[rows], var[rows] = self.models[t].predict(X_star[rows], 0, include_noise)
        return mean, var


def per_task_baseline(ds: Dataset, per_task_specs) -> PerTaskBaseline:
    """Fit-free independent GPs; ``per_task_specs[t]`` is a one-task kernel for task ``t``."""
    per_task_specs = list(per_task_specs)
    if len(per_task_specs) != ds.n_tasks:
        raise InputError(f"need {ds.n_tasks} per-task kernels, got {len(per_task_specs)}")
    models = []
    for t, spec in enumerate(per_task_specs):
        rows = ds.task_rows(t)
        if len(rows) == 0:
            raise EmptyTask(f"task {t} has no rows")
        sub = Dataset(ds.X[rows], np.zeros(len(rows), dtype=np.int64), ds.y[rows], [ds.noise_vars[t]])
        models.append(MultitaskGP(sub, spec))
    return PerTaskBaseline(models)


# ---------------------------------------------------------------- fitting


@dataclass(frozen=True)
class SearchConfig:
    """Nelder-Mead settings.

    Variances are searched as natural logs inside ``log_var_bounds``; task
    covariance factor entries directly inside ``factor_bounds``. Variances
    that start at exactly 0 stay fixed at 0, and the input-layer
    ``omega_v2`` is held fixed because it only rescales ``sigma_u``.
    """

    max_iters: int = 2000
    restarts: int = 0
    tol: float = 1e-6
    fit_noise: bool = True
    log_var_bounds: tuple = (math.log(1e-6), math.log(1e6))
    factor_bounds: tuple = (-1e3, 1e3)
    restart_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.log_var_bounds, self.factor_bounds):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise InvalidBounds(f"bounds must be finite with lower < upper, got ({lo}, {hi})")
        if self.max_iters < 0 or self.restarts < 0:
            raise InvalidBounds("max_iters and restarts must be >= 0")


@dataclass(frozen=True)
class FitResult:
    spec: object
    noise_vars: np.ndarray
    log_marginal: float
    iterations: int
    converged: bool
    history: tuple = field(default=(), repr=False)


class _Codec:
    """Flattens the free hyperparameters of a spec into a search vector."""

    def __init__(self, config: SearchConfig):
        self.cfg = config
        self.x = []
        self.lo = []
        self.hi = []

    def _var(self, v):
        if v > 0:
            self.x.append(math.log(v))
            self.lo.append(self.cfg.log_var_bounds[0])
            self.hi.append(self.cfg.log_var_bounds[1])

    def _factor(self, tc: TaskCovariance):
        rows, cols = np.tril_indices(tc.n_tasks)
        for v in tc.factor[rows, cols]:
            self.x.append(float(v))
            self.lo.append(self.cfg.factor_bounds[0])
            self.hi.append(self.cfg.factor_bounds[1])

    def _base(self, b: BaseKernelSpec, with_c: bool):
        for v in np.ravel(b.sigma_u):
            self._var(float(v))
        self._var(b.input_bias_var)
        self._var(b.sigma_b2)
        if with_c:
            self._var(b.bias_const)

    def _layers(self, layers):
        for layer in layers:
            self._var(layer.sigma_b2)
            self._var(layer.omega_v2)

    def encode(self, spec, noise_vars):
        if isinstance(spec, IcmSpec):
            self._base(spec.base, True)
            self._factor(spec.task_cov)
        elif isinstance(spec, DeepMtSpec):
            self._base(spec.base, False)
            self._layers(spec.layers)
            self._factor(spec.task_cov)
            self._factor(spec.bias_task_cov)
        elif isinstance(spec, LmcSpec):
            for c in spec.components:
                self._base(c.base, False)
                self._layers(c.layers)
                self._factor(c.task_cov)
        elif isinstance(spec, CcSpec):
            for b in spec.bases:
                self._base(b, False)
            self._factor(spec.grid)
        else:
            raise InputError(f"not a kernel spec: {type(spec).__name__}")
        if self.cfg.fit_noise:
            for v in noise_vars:
                self._var(float(v))
        return np.array(self.x), np.array(self.lo), np.array(self.hi)

    @staticmethod
    def decode(x, template, noise_template, fit_noise):
        it = iter(np.asarray(x, dtype=float))

        def var(v):
            return math.exp(next(it)) if v > 0 else 0.0

        def factor(tc):
            rows, cols = np.tril_indices(tc.n_tasks)
            f = np.zeros_like(tc.factor)
            f[rows, cols] = [next(it) for _ in rows]
            return TaskCovariance(f)

        def base(b, with_c):
            if isinstance(b.sigma_u, float):
                su = var(b.sigma_u)
            else:
                su = tuple(var(v) for v in b.sigma_u)
            ibv = var(b.input_bias_var)
            sb = var(b.sigma_b2)
            c = var(b.bias_const) if with_c else b.bias_const
            return BaseKernelSpec(b.activation, su, sb, b.omega_v2, c, ibv)

        def layers(ls):
            return tuple(LayerSpec(var(l.sigma_b2), var(l.omega_v2)) for l in ls)

        s = template
        if isinstance(s, IcmSpec):
            b = base(s.base, True)
            spec = IcmSpec(b, factor(s.task_cov))
        elif isinstance(s, DeepMtSpec):
            b = base(s.base, False)
            ls = layers(s.layers)
            spec = DeepMtSpec(b, ls, factor(s.task_cov), factor(s.bias_task_cov))
        elif isinstance(s, LmcSpec):
            comps = []
            for c in s.components:
                b = base(c.base, False)
                ls = layers(c.layers)
                comps.append(LmcComponent(b, factor(c.task_cov), ls))
            spec = LmcSpec(tuple(comps))
        else:
            bs = tuple(base(b, False) for b in s.bases)
            spec = CcSpec(bs, factor(s.grid), s.n_tasks)
        if fit_noise:
            noise = np.array([var(v) for v in noise_template])
        else:
            noise = np.asarray(noise_template, dtype=float)
        return spec, noise


def fit(ds: Dataset, initial_spec, search_config: SearchConfig | None = None) -> FitResult:
    """Maximize the log marginal likelihood with bounded Nelder-Mead.

    Restart ``r > 0`` re-initializes the simplex around the best point so far,
    perturbed by ``N(0, restart_scale^2)`` from a stream seeded by
    ``(seed, r)``. Points whose Gram matrix cannot be factorized score -inf.
    """
    cfg = search_config or SearchConfig()
    noise0 = np.asarray(ds.noise_vars, dtype=float)
    if cfg.fit_noise and np.any(noise0 <= 0):
        raise InvalidBounds("fitting noise needs strictly positive initial noise variances")
    x0, lo, hi = _Codec(cfg).encode(initial_spec, noise0)
    if np.any(x0 < lo) or np.any(x0 > hi):
        bad = np.flatnonzero((x0 < lo) | (x0 > hi)).tolist()
        raise InvalidBounds(f"initial hyperparameters outside search bounds at positions {bad}")

    def unpack(x):
        return _Codec.decode(x, initial_spec, noise0, cfg.fit_noise)

    def neg_lml(x):
        try:
            spec, noise = unpack(x)
            value = MultitaskGP(ds.with_noise(noise), spec).log_marginal()
        except (NumericalError, InputError, FloatingPointError):
            return math.inf
        return -value if math.isfinite(value) else math.inf

    f0 = neg_lml(x0)
    if not math.isfinite(f0):
        raise NotPSDAfterJitter(JITTER_MAX, "initial hyperparameters give a singular Gram matrix")
    best_x, best_f = x0, f0
    iterations = 0
    converged = False
    history = []
    if cfg.max_iters > 0:
        for r in range(cfg.restarts + 1):
            start = best_x
            if r > 0:
                rng = np.random.default_rng([cfg.seed, r])
                start = np.clip(best_x + cfg.restart_scale * rng.standard_normal(len(best_x)), lo, hi)
            res = scipy.optimize.minimize(
                neg_lml, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                options={"maxiter": cfg.max_iters, "xatol": cfg.tol, "fatol": cfg.tol,
                         "adaptive": len(x0) > 4},
            )
            iterations += int(res.nit)
            history.append(float(-res.fun))
            if res.fun < best_f:
                best_x, best_f = res.x, float(res.fun)
                converged = bool(res.success)
            elif r == 0:
                converged = bool(res.success)
            log.debug("restart %d: log marginal %.6g (%d iterations)", r, -res.fun, res.nit)
    if best_x is x0:
        spec, noise = initial_spec, noise0
    else:
        spec, noise = unpack(best_x)
    return FitResult(spec, noise, -best_f, iterations, converged, tuple(history))
