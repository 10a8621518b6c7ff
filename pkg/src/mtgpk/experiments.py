"""Experiment drivers behind the CLI: convergence sweeps, fit/predict,
the simulated two-task benchmark and the ICM/LMC/independent comparison.

Everything here returns plain dicts ready for :func:`config.dump_json`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn_sim import convergence_study, sample_gp_prior
from .config import SCHEMA, CompareSettings, ExperimentConfig, SimulateSettings, kernel_to_json
from .core import BaseKernelSpec, Dataset, IcmSpec, LmcComponent, LmcSpec, TaskCovariance, load_dataset, save_dataset
from .errors import ConfigError, EmptyTask, InputError, ResourceCapExceeded
from .gp_engine import MultitaskGP, SearchConfig, fit, per_task_baseline
from .multitask_kernels import restrict_to_task

DEFAULT_NOISE = 0.1


def _floats(a):
    return [float(v) for v in np.ravel(a)]


# ---------------------------------------------------------- convergence


def probe_points(cfg: ExperimentConfig):
    """Configured probes, or ``n_probes`` points drawn uniformly from [-2, 2]^d
    with tasks assigned round-robin."""
    conv = cfg.converge
    if conv.probes:
        return np.array(conv.probes, dtype=float), np.array(conv.probe_tasks, dtype=np.int64)
    rng = np.random.default_rng([cfg.seed, 0x9B0BE])
    X = rng.uniform(-2.0, 2.0, size=(conv.n_probes, conv.probe_dim))
    return X, np.arange(conv.n_probes) % cfg.kernel.n_tasks


def verify_converge(cfg: ExperimentConfig, workers=None) -> tuple[dict, bool]:
    if cfg.kernel is None:
        raise ConfigError("verify-converge needs a kernel")
    X, tasks = probe_points(cfg)
    conv = cfg.converge
    report = convergence_study(cfg.kernel, conv.widths, X, tasks, conv.n_draws, cfg.seed, workers, conv.n_boot)
    out = {"schema": SCHEMA, "spec": kernel_to_json(cfg.kernel), **report.to_dict()}
    return out, report.passed


# ---------------------------------------------------------- fit / predict


@dataclass(frozen=True)
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def identity(cls, dim, n_tasks):
        return cls(np.zeros(dim), np.ones(dim), np.zeros(n_tasks), np.ones(n_tasks))

    @classmethod
    def from_train(cls, ds: Dataset):
        """Train-split statistics; constant columns and tasks with < 2 rows keep unit scale."""
        x_std = ds.X.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_mean = np.zeros(ds.n_tasks)
        y_std = np.ones(ds.n_tasks)
        for t in range(ds.n_tasks):
            y = ds.y[ds.tasks == t]
            if len(y):
                y_mean[t] = y.mean()
            if len(y) > 1 and y.std() > 0:
                y_std[t] = y.std()
        return cls(ds.X.mean(axis=0), x_std, y_mean, y_std)

    def inputs(self, X):
        return (X - self.x_mean) / self.x_std

    def dataset(self, ds: Dataset, noise_vars):
        y = (ds.y - self.y_mean[ds.tasks]) / self.y_std[ds.tasks]
        return Dataset(self.inputs(ds.X), ds.tasks, y, np.asarray(noise_vars) / self.y_std ** 2)


def _noise_init(cfg, n_tasks):
    if cfg.noise_vars is not None:
        return np.asarray(cfg.noise_vars, dtype=float)
    return np.full(n_tasks, DEFAULT_NOISE)


def _search(cfg: ExperimentConfig) -> SearchConfig:
    return dataclasses.replace(cfg.fit.search, seed=cfg.seed)


def _fit_model(ds, spec, cfg):
    if not cfg.fit.enabled:
        return spec, ds.noise_vars, None
    res = fit(ds, spec, _search(cfg))
    return res.spec, res.noise_vars, res


def _per_task_mse(y, mean, tasks, n_tasks):
    out = []
    for t in range(n_tasks):
        rows = tasks == t
        out.append(float(np.mean((y[rows] - mean[rows]) ** 2)) if rows.any() else None)
    return out


def fit_predict(cfg: ExperimentConfig, train: Dataset, test: Dataset, baseline: str | None = None,
                standardize: bool = False):
    """Fit on ``train`` and predict at the rows of ``test``.

    Returns ``(predictions, summary)``: an (n_test, 3) array of mean, latent
    variance and observation variance, and the summary dict. Reported
    quantities are on the original target scale.
    """
    spec = cfg.kernel
    if spec is None:
        raise ConfigError("fit-predict needs a kernel")
    T = spec.n_tasks
    if train.n > cfg.caps.max_n:
        raise ResourceCapExceeded(f"{train.n} training rows exceed caps.max_n={cfg.caps.max_n}")
    for name, ds in (("train", train), ("test", test)):
        if ds.tasks.max() >= T:
            raise InputError(f"{name} file has task {int(ds.tasks.max())} but the kernel has {T} tasks")
    if train.dim != test.dim:
        raise InputError(f"train has d={train.dim} but test has d={test.dim}")
    noise = _noise_init(cfg, T)
    train = Dataset(train.X, train.tasks, train.y, noise)
    scaler = Standardizer.from_train(train) if standardize else Standardizer.identity(train.dim, T)
    z_train = scaler.dataset(train, noise)
    X_test = scaler.inputs(test.X)
    jac = float(np.sum(np.log(scaler.y_std[train.tasks])))

    summary = {"schema": SCHEMA, "n_train": train.n, "n_test": test.n, "standardize": standardize,
               "seed": cfg.seed}
    if baseline == "independent":
        specs, noises, fits, lml = [], [], [], 0.0
        for t in range(T):
            rows = z_train.task_rows(t)
            if len(rows) == 0:
                raise EmptyTask(f"task {t} has no training rows")
            sub = Dataset(z_train.X[rows], np.zeros(len(rows), dtype=np.int64), z_train.y[rows],
                          [z_train.noise_vars[t]])
            s, nv, res = _fit_model(sub, restrict_to_task(spec, t), cfg)
            specs.append(s)
            noises.append(float(nv[0]))
            fits.append(res)
        z_train = z_train.with_noise(noises)
        model = per_task_baseline(z_train, specs)
        lml = sum(m.log_marginal() for m in model.models)
        summary["model"] = "independent"
        summary["kernel"] = [kernel_to_json(s) for s in specs]
        summary["jitter"] = [m.factor.jitter for m in model.models]
    elif baseline is None:
        s, nv, res = _fit_model(z_train, spec, cfg)
        fits = [res]
        z_train = z_train.with_noise(nv)
        model = MultitaskGP(z_train, s)
        lml = model.log_marginal()
        summary["model"] = "multitask"
        summary["kernel"] = kernel_to_json(s)
        summary["jitter"] = model.factor.jitter
    else:
        raise ConfigError(f"unknown baseline {baseline!r}; expected 'independent'")

    mean, var_f = model.predict(X_test, test.tasks, include_noise=False)
    sd = scaler.y_std[test.tasks]
    mean = mean * sd + scaler.y_mean[test.tasks]
    var_f = var_f * sd ** 2
    var_y = var_f + z_train.noise_vars[test.tasks] * sd ** 2

    summary["noise_vars"] = _floats(z_train.noise_vars * scaler.y_std ** 2)
    summary["log_marginal"] = float(lml - jac)
    summary["per_task_mse"] = _per_task_mse(test.y, mean, test.tasks, T)
    summary["mse"] = float(np.mean((test.y - mean) ** 2))
    summary["fit"] = [None if r is None else {"iterations": r.iterations, "converged": r.converged}
                      for r in fits]
    return np.column_stack([mean, var_f, var_y]), summary


# ---------------------------------------------------------- simulation


def erf_task_kernel(k: float, amplitude: float = 1.0, offset: float = 0.0) -> IcmSpec:
    """One-task erf kernel with ``Sigma = 10**k * I`` on the augmented input ``(1, x)``."""
    s = 10.0 ** k
    return IcmSpec(BaseKernelSpec("erf", sigma_u=s, input_bias_var=s, bias_const=offset),
                   TaskCovariance.diagonal([amplitude]))


@dataclass(frozen=True, eq=False)
class Simulated:
    grid: np.ndarray
    f: np.ndarray           # (2, n_points) noise-free sample paths
    train: Dataset
    dev: Dataset
    test: Dataset


def _split_sizes(n, fractions):
    n_train = int(round(n * fractions[0]))
    n_dev = int(round(n * fractions[1]))
    if min(n_train, n_dev, n - n_train - n_dev) < 1:
        raise ConfigError(f"splits {fractions} leave an empty split for {n} points")
    return n_train, n_dev


def simulate(settings: SimulateSettings, seed: int) -> Simulated:
    """Two independent GP draws on a shared 1-D grid (task ``t`` with ``k_t``),
    observed with Gaussian noise and split at random per task."""
    grid = np.linspace(settings.x_range[0], settings.x_range[1], settings.n_points)
    X = grid[:, None]
    n_train, n_dev = _split_sizes(settings.n_points, settings.splits)
    f = np.empty((2, settings.n_points))
    parts = {"train": [], "dev": [], "test": []}
    for t, k in enumerate((settings.k1, settings.k2)):
        spec = erf_task_kernel(k, settings.amplitude, settings.offset)
        f[t] = sample_gp_prior(spec, X, np.zeros(len(X), dtype=np.int64), [seed, t])
        y = f[t] + math.sqrt(settings.noise_var) * np.random.default_rng([seed, 2, t]).standard_normal(len(X))
        perm = np.random.default_rng([seed, 3, t]).permutation(settings.n_points)
        for name, idx in (("train", perm[:n_train]), ("dev", perm[n_train:n_train + n_dev]),
                          ("test", perm[n_train + n_dev:])):
            idx = np.sort(idx)
            parts[name].append((X[idx], np.full(len(idx), t), y[idx]))
    noise = [settings.noise_var] * 2
    ds = {name: Dataset(np.concatenate([p[0] for p in ps]), np.concatenate([p[1] for p in ps]),
                        np.concatenate([p[2] for p in ps]), noise)
          for name, ps in parts.items()}
    return Simulated(grid, f, ds["train"], ds["dev"], ds["test"])


def mean_squared_increment(path) -> float:
    return float(np.mean(np.diff(path) ** 2))


def write_simulated(sim: Simulated, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("train", "dev", "test"):
        p = out_dir / f"{name}.csv"
        save_dataset(getattr(sim, name), p)
        paths.append(p)
    return paths


def read_simulated(data_dir, noise_vars=None):
    data_dir = Path(data_dir)
    out = []
    for name in ("train", "dev", "test"):
        p = data_dir / f"{name}.csv"
        if not p.exists():
            raise ConfigError(f"{data_dir}: missing {name}.csv (run 'mtgpk simulate' first)")
        out.append(load_dataset(p, noise_vars))
    return tuple(out)


# ---------------------------------------------------------- comparison


def _best_fit(ds, candidates, search):
    """Fit from each ``(spec, noise_vars)`` start; keep the highest evidence."""
    best = None
    for spec, noise in candidates:
        res = fit(ds.with_noise(noise), spec, search)
        if best is None or res.log_marginal > best.log_marginal:
            best = res
    return best


def _erf_base(scale):
    return BaseKernelSpec("erf", sigma_u=scale, input_bias_var=scale)


def _lmc_candidates(scales, n_comp, T, y_var, noise0, icm_fit, ind_fits):
    """Cold start at the configured scales, plus warm starts from the two
    nested submodels: the fitted ICM and the fitted independent GPs."""
    cold = tuple(LmcComponent(_erf_base(scales[m % len(scales)]), TaskCovariance.diagonal([y_var / n_comp] * T))
                 for m in range(n_comp))
    out = [(LmcSpec(cold), noise0)]
    small = TaskCovariance.diagonal([0.01 * y_var] * T)
    if n_comp > 1:
        first = LmcComponent(icm_fit.spec.base, icm_fit.spec.task_cov)
        rest = tuple(LmcComponent(c.base, small) for c in cold[1:])
        out.append((LmcSpec((first,) + rest), icm_fit.noise_vars))
    if n_comp >= T:
        comps = []
        for t, res in enumerate(ind_fits):
            # the diagonal must stay positive, so other tasks get a trace amount
            amp = np.full(T, 1e-4 * y_var)
            amp[t] = res.spec.task_cov.matrix[0, 0]
            comps.append(LmcComponent(res.spec.base, TaskCovariance.diagonal(amp)))
        comps += [LmcComponent(c.base, small) for c in cold[T:]]
        out.append((LmcSpec(tuple(comps)), np.array([float(r.noise_vars[0]) for r in ind_fits])))
    return out


def _evaluate(model, test, T):
    mean, _ = model.predict(test.X, test.tasks, include_noise=False)
    return _per_task_mse(test.y, mean, test.tasks, T)


def compare(train: Dataset, dev: Dataset, test: Dataset, settings: CompareSettings, search: SearchConfig,
            rough_task: int | None = None) -> tuple[dict, bool]:
    """Fit ICM, LMC and independent GPs on ``train`` and score them on ``dev`` and ``test``.

    Each model family is fitted from the same set of initial input scales
    and the fit with the highest log marginal likelihood is kept.
    """
    T = 2
    noise0 = np.full(T, settings.init_noise)
    train = train.with_noise(noise0)
    y_var = float(np.var(train.y)) or 1.0
    scales = settings.init_scales

    icm = _best_fit(train, [(IcmSpec(_erf_base(sc), TaskCovariance.diagonal([y_var] * T)), noise0)
                            for sc in scales], search)
    ind_fits = []
    for t in range(T):
        rows = train.task_rows(t)
        if len(rows) == 0:
            raise EmptyTask(f"task {t} has no training rows")
        sub = Dataset(train.X[rows], np.zeros(len(rows), dtype=np.int64), train.y[rows], noise0[:1])
        v = float(np.var(sub.y)) or 1.0
        ind_fits.append(_best_fit(sub, [(IcmSpec(_erf_base(sc), TaskCovariance.diagonal([v])), noise0[:1])
                                        for sc in scales], search))
    lmc = _best_fit(train, _lmc_candidates(scales, settings.lmc_components, T, y_var, noise0, icm, ind_fits),
                    search)
    ind_specs = [r.spec for r in ind_fits]
    ind_noise = [float(r.noise_vars[0]) for r in ind_fits]
    ind_lml = sum(r.log_marginal for r in ind_fits)
    ind_model = per_task_baseline(train.with_noise(ind_noise), ind_specs)

    table = {}
    for name, res in (("icm", icm), ("lmc", lmc)):
        model = MultitaskGP(train.with_noise(res.noise_vars), res.spec)
        table[name] = {"log_marginal": res.log_marginal, "noise_vars": _floats(res.noise_vars),
                       "kernel": kernel_to_json(res.spec),
                       "dev_mse": _evaluate(model, dev, T), "test_mse": _evaluate(model, test, T)}
    table["independent"] = {"log_marginal": float(ind_lml), "noise_vars": ind_noise,
                            "kernel": [kernel_to_json(s) for s in ind_specs],
                            "dev_mse": _evaluate(ind_model, dev, T), "test_mse": _evaluate(ind_model, test, T)}

    # block-diagonal check: the fitted ICM with its task correlation removed
    # must coincide with independent GPs under the same hyperparameters
    diag = IcmSpec(icm.spec.base, TaskCovariance.diagonal(np.diag(icm.spec.task_cov.matrix)))
    ds_icm = train.with_noise(icm.noise_vars)
    joint = MultitaskGP(ds_icm, diag).predict(test.X, test.tasks)
    split = per_task_baseline(ds_icm, [restrict_to_task(diag, t) for t in range(T)]).predict(test.X, test.tasks)
    diag_diff = max(float(np.max(np.abs(a - b))) for a, b in zip(joint, split))

    checks = {"diag_icm_vs_independent_max_abs_diff": diag_diff,
              "diag_icm_matches_independent": diag_diff <= 1e-8}
    ok = checks["diag_icm_matches_independent"]
    if rough_task is not None:
        lmc_ok = table["lmc"]["test_mse"][rough_task] <= table["icm"]["test_mse"][rough_task]
        checks["lmc_le_icm_on_rough_task"] = lmc_ok
        ok = ok and lmc_ok
    else:
        checks["lmc_le_icm_on_rough_task"] = None
    return {"schema": SCHEMA, "rough_task": rough_task, "models": table, "checks": checks, "pass": ok}, ok


def rough_task_of(settings: SimulateSettings):
    if settings.k1 == settings.k2:
        return None
    return 0 if settings.k1 > settings.k2 else 1
