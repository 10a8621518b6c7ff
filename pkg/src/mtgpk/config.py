"""JSON forms of kernel specs and experiment configs.

Every object rejects unknown keys. Task covariances are written back as
their factors so a spec survives a round trip bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    BaseKernelSpec,
    CcSpec,
    DeepMtSpec,
    IcmSpec,
    LayerSpec,
    LmcComponent,
    LmcSpec,
    TaskCovariance,
)
from .errors import ConfigError, InputError, ResourceCapExceeded
from .gp_engine import SearchConfig

SCHEMA = "mtgpk/v1"


def _keys(obj, where, required=(), optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ConfigError(f"{where}: missing field(s) {missing}")
    return obj


def _wrap(where, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (InputError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# ------------------------------------------------------------- kernels


def task_cov_from_json(obj, where="task_cov") -> TaskCovariance:
    if isinstance(obj, list):
        return _wrap(where, TaskCovariance.from_matrix, obj)
    _keys(obj, where, optional=("factor", "matrix", "diagonal"))
    if len(obj) != 1:
        raise ConfigError(f"{where}: give exactly one of factor, matrix, diagonal")
    (kind, value), = obj.items()
    if kind == "factor":
        return _wrap(where, TaskCovariance, value)
    if kind == "matrix":
        return _wrap(where, TaskCovariance.from_matrix, value)
    return _wrap(where, TaskCovariance.diagonal, value)


def task_cov_to_json(tc: TaskCovariance):
    return {"factor": tc.factor.tolist()}


_BASE_FIELDS = ("sigma_u", "sigma_b2", "omega_v2", "bias_const", "input_bias_var")


def base_from_json(obj, where="base") -> BaseKernelSpec:
    _keys(obj, where, required=("activation",), optional=_BASE_FIELDS)
    return _wrap(where, lambda: BaseKernelSpec(**obj))


def base_to_json(b: BaseKernelSpec):
    out = {"activation": b.activation}
    out["sigma_u"] = b.sigma_u if isinstance(b.sigma_u, float) else list(b.sigma_u)
    for name in _BASE_FIELDS[1:]:
        out[name] = getattr(b, name)
    return out


def layers_from_json(obj, where="layers"):
    if not isinstance(obj, list):
        raise ConfigError(f"{where}: expected a list")
    out = []
    for i, item in enumerate(obj):
        _keys(item, f"{where}[{i}]", optional=("sigma_b2", "omega_v2"))
        out.append(_wrap(f"{where}[{i}]", lambda: LayerSpec(**{k: float(v) for k, v in item.items()})))
    return tuple(out)


def layers_to_json(layers):
    return [{"sigma_b2": l.sigma_b2, "omega_v2": l.omega_v2} for l in layers]


def kernel_from_json(obj, where="kernel"):
    if not isinstance(obj, dict) or "type" not in obj:
        raise ConfigError(f"{where}: expected an object with a 'type' field")
    kind = obj["type"]
    if kind == "icm":
        _keys(obj, where, required=("type", "base", "task_cov"))
        return IcmSpec(base_from_json(obj["base"], f"{where}.base"), task_cov_from_json(obj["task_cov"], f"{where}.task_cov"))
    if kind == "deep_mt":
        _keys(obj, where, required=("type", "base", "task_cov", "bias_task_cov"), optional=("layers",))
        return _wrap(where, DeepMtSpec,
                     base_from_json(obj["base"], f"{where}.base"),
                     layers_from_json(obj.get("layers", []), f"{where}.layers"),
                     task_cov_from_json(obj["task_cov"], f"{where}.task_cov"),
                     task_cov_from_json(obj["bias_task_cov"], f"{where}.bias_task_cov"))
    if kind == "lmc":
        _keys(obj, where, required=("type", "components"))
        comps = []
        for i, c in enumerate(obj["components"]):
            w = f"{where}.components[{i}]"
            _keys(c, w, required=("base", "task_cov"), optional=("layers",))
            comps.append(LmcComponent(base_from_json(c["base"], f"{w}.base"),
                                      task_cov_from_json(c["task_cov"], f"{w}.task_cov"),
                                      layers_from_json(c.get("layers", []), f"{w}.layers")))
        return _wrap(where, LmcSpec, tuple(comps))
    if kind == "cc":
        _keys(obj, where, required=("type", "bases"), optional=("n_tasks", "grid", "blocks"))
        bases = tuple(base_from_json(b, f"{where}.bases[{i}]") for i, b in enumerate(obj["bases"]))
        if ("grid" in obj) == ("blocks" in obj):
            raise ConfigError(f"{where}: give exactly one of grid, blocks")
        if "blocks" in obj:
            return _wrap(where, CcSpec.from_blocks, bases, obj["blocks"])
        if "n_tasks" not in obj:
            raise ConfigError(f"{where}: n_tasks is required with grid")
        return _wrap(where, CcSpec, bases, task_cov_from_json(obj["grid"], f"{where}.grid"), int(obj["n_tasks"]))
    raise ConfigError(f"{where}: unknown kernel type {kind!r}; expected icm, deep_mt, lmc or cc")


def kernel_to_json(spec):
    if isinstance(spec, IcmSpec):
        return {"type": "icm", "base": base_to_json(spec.base), "task_cov": task_cov_to_json(spec.task_cov)}
    if isinstance(spec, DeepMtSpec):
        return {"type": "deep_mt", "base": base_to_json(spec.base), "layers": layers_to_json(spec.layers),
                "task_cov": task_cov_to_json(spec.task_cov), "bias_task_cov": task_cov_to_json(spec.bias_task_cov)}
    if isinstance(spec, LmcSpec):
        return {"type": "lmc", "components": [
            {"base": base_to_json(c.base), "task_cov": task_cov_to_json(c.task_cov), "layers": layers_to_json(c.layers)}
            for c in spec.components]}
    if isinstance(spec, CcSpec):
        return {"type": "cc", "bases": [base_to_json(b) for b in spec.bases], "n_tasks": spec.n_tasks,
                "grid": task_cov_to_json(spec.grid)}
    raise InputError(f"not a kernel spec: {type(spec).__name__}")


# ------------------------------------------------------------- settings


@dataclass(frozen=True)
class FitSettings:
    enabled: bool = True
    search: SearchConfig = field(default_factory=SearchConfig)


@dataclass(frozen=True)
class ConvergeSettings:
    widths: tuple = (64, 512, 4096)
    n_draws: int = 50_000
    probes: tuple = ()
    probe_tasks: tuple = ()
    n_probes: int = 6
    probe_dim: int = 2
    n_boot: int = 200


@dataclass(frozen=True)
class SimulateSettings:
    """Two-task benchmark: independent erf-kernel GP draws with
    ``Sigma = 10**k * I`` on the bias-augmented 1-D input."""

    k1: float = 0.0
    k2: float = 3.0
    n_points: int = 100
    x_range: tuple = (-2.0, 2.0)
    noise_var: float = 0.01
    splits: tuple = (0.5, 0.25, 0.25)
    amplitude: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class CompareSettings:
    lmc_components: int = 2
    init_scales: tuple = (1.0, 100.0)
    init_noise: float = 0.1


@dataclass(frozen=True)
class Caps:
    max_n: int = 5000
    max_width: int = 16384
    max_draws: int = 1_000_000
    max_points: int = 12


@dataclass(frozen=True)
class ExperimentConfig:
    kernel: object = None
    dataset: str | None = None
    noise_vars: tuple | None = None
    seed: int = 0
    standardize: bool = False
    fit: FitSettings = field(default_factory=FitSettings)
    converge: ConvergeSettings = field(default_factory=ConvergeSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)
    caps: Caps = field(default_factory=Caps)
    output: str | None = None


def _num(value, where, kind=float, positive=False, nonneg=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if kind is int and not float(value).is_integer():
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    value = kind(value)
    if not math.isfinite(value):
        raise ConfigError(f"{where}: must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{where}: must be > 0")
    if nonneg and value < 0:
        raise ConfigError(f"{where}: must be >= 0")
    return value


def _bool(value, where):
    if not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false")
    return value


def _pair(value, where):
    if not (isinstance(value, list) and len(value) == 2):
        raise ConfigError(f"{where}: expected [lower, upper]")
    return (_num(value[0], where), _num(value[1], where))


def _fit(obj):
    _keys(obj, "fit", optional=("enabled", "max_iters", "restarts", "tol", "fit_noise", "log_var_bounds",
                                "factor_bounds", "restart_scale"))
    search = {}
    if "max_iters" in obj:
        search["max_iters"] = _num(obj["max_iters"], "fit.max_iters", int, nonneg=True)
    if "restarts" in obj:
        search["restarts"] = _num(obj["restarts"], "fit.restarts", int, nonneg=True)
    if "tol" in obj:
        search["tol"] = _num(obj["tol"], "fit.tol", positive=True)
    if "fit_noise" in obj:
        search["fit_noise"] = _bool(obj["fit_noise"], "fit.fit_noise")
    if "log_var_bounds" in obj:
        search["log_var_bounds"] = _pair(obj["log_var_bounds"], "fit.log_var_bounds")
    if "factor_bounds" in obj:
        search["factor_bounds"] = _pair(obj["factor_bounds"], "fit.factor_bounds")
    if "restart_scale" in obj:
        search["restart_scale"] = _num(obj["restart_scale"], "fit.restart_scale", nonneg=True)
    return FitSettings(_bool(obj.get("enabled", True), "fit.enabled"), _wrap("fit", lambda: SearchConfig(**search)))


def _converge(obj):
    _keys(obj, "converge", optional=("widths", "n_draws", "probes", "probe_tasks", "n_probes", "probe_dim", "n_boot"))
    out = {}
    if "widths" in obj:
        if not isinstance(obj["widths"], list) or not obj["widths"]:
            raise ConfigError("converge.widths: expected a non-empty list")
        out["widths"] = tuple(_num(w, "converge.widths", int, positive=True) for w in obj["widths"])
        if list(out["widths"]) != sorted(out["widths"]):
            raise ConfigError("converge.widths: must be ascending")
    if "n_draws" in obj:
        out["n_draws"] = _num(obj["n_draws"], "converge.n_draws", int)
        if out["n_draws"] < 1000:
            raise ConfigError("converge.n_draws: must be >= 1000")
    if "n_probes" in obj:
        out["n_probes"] = _num(obj["n_probes"], "converge.n_probes", int, positive=True)
    if "probe_dim" in obj:
        out["probe_dim"] = _num(obj["probe_dim"], "converge.probe_dim", int, positive=True)
    if "n_boot" in obj:
        out["n_boot"] = _num(obj["n_boot"], "converge.n_boot", int, positive=True)
    if ("probes" in obj) != ("probe_tasks" in obj):
        raise ConfigError("converge: probes and probe_tasks go together")
    if "probes" in obj:
        probes = _wrap("converge.probes", lambda: np.asarray(obj["probes"], dtype=float))
        tasks = _wrap("converge.probe_tasks", lambda: np.asarray(obj["probe_tasks"], dtype=np.int64))
        if probes.ndim != 2 or tasks.shape != (len(probes),) or not np.all(np.isfinite(probes)):
            raise ConfigError("converge.probes: expected an s x d list of finite rows with one task each")
        out["probes"] = tuple(map(tuple, probes.tolist()))
        out["probe_tasks"] = tuple(tasks.tolist())
    return ConvergeSettings(**out)


def _simulate(obj):
    _keys(obj, "simulate", optional=("k1", "k2", "n_points", "x_range", "noise_var", "splits", "amplitude", "offset"))
    out = {}
    for name in ("k1", "k2"):
        if name in obj:
            out[name] = _num(obj[name], f"simulate.{name}")
    if "n_points" in obj:
        out["n_points"] = _num(obj["n_points"], "simulate.n_points", int)
        if out["n_points"] < 4:
            raise ConfigError("simulate.n_points: must be >= 4")
    if "x_range" in obj:
        lo, hi = _pair(obj["x_range"], "simulate.x_range")
        if lo >= hi:
            raise ConfigError("simulate.x_range: lower must be < upper")
        out["x_range"] = (lo, hi)
    if "noise_var" in obj:
        out["noise_var"] = _num(obj["noise_var"], "simulate.noise_var", nonneg=True)
    if "amplitude" in obj:
        out["amplitude"] = _num(obj["amplitude"], "simulate.amplitude", positive=True)
    if "offset" in obj:
        out["offset"] = _num(obj["offset"], "simulate.offset", nonneg=True)
    if "splits" in obj:
        sp = obj["splits"]
        if not (isinstance(sp, list) and len(sp) == 3):
            raise ConfigError("simulate.splits: expected [train, dev, test]")
        sp = tuple(_num(v, "simulate.splits", positive=True) for v in sp)
        if abs(sum(sp) - 1.0) > 1e-9:
            raise ConfigError("simulate.splits: fractions must sum to 1")
        out["splits"] = sp
    return SimulateSettings(**out)


def _compare(obj):
    _keys(obj, "compare", optional=("lmc_components", "init_scales", "init_noise"))
    out = {}
    if "lmc_components" in obj:
        out["lmc_components"] = _num(obj["lmc_components"], "compare.lmc_components", int, positive=True)
    if "init_scales" in obj:
        if not isinstance(obj["init_scales"], list) or not obj["init_scales"]:
            raise ConfigError("compare.init_scales: expected a non-empty list")
        out["init_scales"] = tuple(_num(v, "compare.init_scales", positive=True) for v in obj["init_scales"])
    if "init_noise" in obj:
        out["init_noise"] = _num(obj["init_noise"], "compare.init_noise", positive=True)
    return CompareSettings(**out)


def _caps(obj):
    _keys(obj, "caps", optional=("max_n", "max_width", "max_draws", "max_points"))
    return Caps(**{k: _num(v, f"caps.{k}", int, positive=True) for k, v in obj.items()})


_TOP = ("schema", "seed", "kernel", "dataset", "noise_vars", "standardize", "fit", "converge", "simulate",
        "compare", "caps", "output")


def config_from_dict(obj) -> ExperimentConfig:
    _keys(obj, "config", optional=_TOP)
    if "schema" in obj and obj["schema"] != SCHEMA:
        raise ConfigError(f"config.schema: expected {SCHEMA!r}, got {obj['schema']!r}")
    kw = {}
    if "kernel" in obj:
        kw["kernel"] = kernel_from_json(obj["kernel"])
    if "dataset" in obj:
        if not isinstance(obj["dataset"], str):
            raise ConfigError("dataset: expected a path string")
        kw["dataset"] = obj["dataset"]
    if "noise_vars" in obj:
        nv = obj["noise_vars"]
        if not isinstance(nv, list) or not nv:
            raise ConfigError("noise_vars: expected a non-empty list")
        kw["noise_vars"] = tuple(_num(v, "noise_vars", nonneg=True) for v in nv)
    if "seed" in obj:
        kw["seed"] = _num(obj["seed"], "seed", int, nonneg=True)
    if "standardize" in obj:
        kw["standardize"] = _bool(obj["standardize"], "standardize")
    if "output" in obj:
        kw["output"] = str(obj["output"])
    for name, parse in (("fit", _fit), ("converge", _converge), ("simulate", _simulate),
                        ("compare", _compare), ("caps", _caps)):
        if name in obj:
            kw[name] = parse(obj[name])
    cfg = ExperimentConfig(**kw)
    if cfg.kernel is not None and cfg.noise_vars is not None and len(cfg.noise_vars) != cfg.kernel.n_tasks:
        raise ConfigError(f"noise_vars has {len(cfg.noise_vars)} entries but the kernel has {cfg.kernel.n_tasks} tasks")
    check_caps(cfg)
    return cfg


def check_caps(cfg: ExperimentConfig):
    c = cfg.caps
    if max(cfg.converge.widths) > c.max_width:
        raise ResourceCapExceeded(f"width {max(cfg.converge.widths)} exceeds caps.max_width={c.max_width}")
    if cfg.converge.n_draws > c.max_draws:
        raise ResourceCapExceeded(f"n_draws {cfg.converge.n_draws} exceeds caps.max_draws={c.max_draws}")
    n_probes = len(cfg.converge.probes) or cfg.converge.n_probes
    if n_probes > c.max_points:
        raise ResourceCapExceeded(f"{n_probes} probe points exceed caps.max_points={c.max_points}")
    if 2 * cfg.simulate.n_points > c.max_n:
        raise ResourceCapExceeded(f"simulated rows exceed caps.max_n={c.max_n}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(obj)


def dump_json(obj) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
