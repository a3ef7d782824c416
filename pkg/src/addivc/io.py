"""Dataset CSV files, YAML configuration and JSON reports.

Polynomial coefficients in configuration files are ascending in the
operator (``[c0, c1, ...]``). Submodel denominators are given without their
unit constant term, i.e. ``a: [a_1, ..., a_n]`` means
``1 + a_1 p + ... + a_n p^n``, and numerators as ``b: [b_0, ..., b_m]``.
"""

from __future__ import annotations

import json
import os
from typing import Any, Optional

import numpy as np
import yaml

from . import experiments as ex
from .estimator import EstimatorConfig, perturb_parameters
from .lti import (
    AdditiveModel,
    CtSubmodel,
    CtTransferFunction,
    DtTransferFunction,
    ModelStructure,
    additive_to_unfactored,
    pack_parameters,
)
from .signals import Dataset, ExperimentConfig, NoiseModel, SampledSignal, SignalSpec

__all__ = [
    "ConfigError",
    "write_dataset_csv",
    "read_dataset_csv",
    "load_yaml",
    "model_from_dict",
    "model_to_dict",
    "structure_from_dict",
    "controller_from_dict",
    "experiment_from_dict",
    "estimator_config_from_dict",
    "initial_parameters",
    "plan_from_dict",
    "write_json",
    "read_json",
]

PRESETS = {
    "open_loop": ex.open_loop_experiment,
    "closed_loop": ex.closed_loop_experiment,
    "rigid_body": ex.rigid_body_experiment,
    "modal": ex.modal_experiment,
}


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending field."""


def write_dataset_csv(path: str, data: Dataset) -> None:
    """Write ``k,t,u,y[,r]`` with 17 significant digits."""
    N, h = data.N, data.h
    cols = [np.arange(N), np.arange(N) * h, data.u.values, data.y.values]
    header = "k,t,u,y"
    if data.r is not None:
        cols.append(data.r.values)
        header += ",r"
    arr = np.column_stack(cols)
    fmt = ["%d"] + ["%.17g"] * (arr.shape[1] - 1)
    np.savetxt(path, arr, fmt=fmt, delimiter=",", header=header, comments="")


def read_dataset_csv(path: str, h: Optional[float] = None, rtol: float = 1e-9) -> Dataset:
    """Read a dataset; ``h`` is inferred from the ``t`` column unless given."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such data file: {path}")
    with open(path) as fh:
        header = [c.strip() for c in fh.readline().strip().split(",")]
    for col in ("t", "u", "y"):
        if col not in header:
            raise ConfigError(f"{path}: missing column {col!r}")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[1] != len(header):
        raise ConfigError(f"{path}: {arr.shape[1]} columns but header lists {len(header)}")
    col = {name: arr[:, i] for i, name in enumerate(header)}
    t = col["t"]
    if h is None:
        if t.size < 2:
            raise ConfigError(f"{path}: cannot infer h from a single sample")
        dt = np.diff(t)
        h = float((t[-1] - t[0]) / (t.size - 1))
        if not h > 0 or np.max(np.abs(dt - h)) > rtol * max(h, np.abs(t).max()):
            raise ConfigError(f"{path}: time column is not uniformly sampled")
    r = SampledSignal(col["r"], h) if "r" in col else None
    return Dataset(SampledSignal(col["u"], h), SampledSignal(col["y"], h), r=r)


def load_yaml(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such config file: {path}")
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _get(d: dict, key: str, where: str, default: Any = ...):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    if key not in d:
        if default is ...:
            raise ConfigError(f"{where}.{key}: required field missing")
        return default
    return d[key]


def _floats(x, where: str) -> np.ndarray:
    try:
        arr = np.atleast_1d(np.asarray(x, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected a list of numbers") from exc
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: expected a flat list of finite numbers")
    return arr


def model_from_dict(d: dict, where: str = "model") -> AdditiveModel:
    subs_cfg = _get(d, "submodels", where)
    if not isinstance(subs_cfg, list) or not subs_cfg:
        raise ConfigError(f"{where}.submodels: expected a non-empty list")
    subs = []
    for k, s in enumerate(subs_cfg):
        w = f"{where}.submodels[{k}]"
        a_cfg = _get(s, "a", w, [])
        a = _floats(a_cfg, w + ".a") if np.size(a_cfg) else np.zeros(0)
        b = _floats(_get(s, "b", w), w + ".b")
        try:
            subs.append(CtSubmodel(np.concatenate(([1.0], a)), b))
        except ValueError as exc:
            raise ConfigError(f"{w}: {exc}") from exc
    try:
        return AdditiveModel(tuple(subs), int(d.get("integrator_order", 0)), int(d.get("input_delay", 0)))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def model_to_dict(model: AdditiveModel) -> dict:
    return {
        "integrator_order": model.integrator_order,
        "input_delay": model.input_delay,
        "submodels": [{"a": s.a[1:].tolist(), "b": s.b.tolist()} for s in model.submodels],
    }


def structure_from_dict(d: dict, where: str = "structure") -> ModelStructure:
    orders = _get(d, "orders", where)
    try:
        return ModelStructure(
            tuple(tuple(o) for o in orders), int(d.get("integrator_order", 0)), int(d.get("input_delay", 0))
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.orders: {exc}") from exc


def controller_from_dict(d: dict, h: float, where: str = "controller") -> DtTransferFunction:
    """Either ``{pid: {kp, ki, kd}}`` or ``{num: [...], den: [...]}`` in ``q``."""
    if "pid" in d:
        pid = d["pid"]
        return ex.pid_controller(h, float(_get(pid, "kp", where + ".pid")),
                                 float(_get(pid, "ki", where + ".pid")), float(_get(pid, "kd", where + ".pid")))
    try:
        return DtTransferFunction(_floats(_get(d, "num", where), where + ".num"),
                                  _floats(_get(d, "den", where), where + ".den"), h)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def _signal_from_dict(d: dict, where: str) -> SignalSpec:
    band = d.get("band")
    try:
        return SignalSpec(
            d.get("kind", "gaussian_white"), float(d.get("variance", 1.0)),
            tuple(band) if band is not None else None, d.get("lines"), d.get("period"), int(d.get("hold", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _noise_from_dict(d: dict, where: str) -> NoiseModel:
    try:
        return NoiseModel(_floats(d.get("num", [1.0]), where + ".num"),
                          _floats(d.get("den", [1.0]), where + ".den"), float(d.get("variance", 0.0)))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def experiment_from_dict(d: dict, where: str = "experiment") -> ExperimentConfig:
    """Build an experiment; ``preset`` selects a built-in benchmark."""
    if "preset" in d:
        name = d["preset"]
        if name not in PRESETS:
            raise ConfigError(f"{where}.preset: unknown preset {name!r} (choose from {sorted(PRESETS)})")
        kw = {"N": int(_get(d, "N", where)), "seed": int(d.get("seed", 0))}
        if "noise_variance" in d:
            kw["noise_variance"] = float(d["noise_variance"])
        return PRESETS[name](**kw)
    h = float(_get(d, "h", where))
    model = model_from_dict(_get(d, "model", where), where + ".model")
    controller = controller_from_dict(d["controller"], h, where + ".controller") if d.get("controller") else None
    try:
        return ExperimentConfig(
            model,
            _signal_from_dict(d.get("excitation", {}), where + ".excitation"),
            _noise_from_dict(d.get("noise", {}), where + ".noise"),
            int(_get(d, "N", where)), h, int(d.get("seed", 0)), controller,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def estimator_config_from_dict(d: Optional[dict], where: str = "estimator") -> EstimatorConfig:
    d = d or {}
    allowed = {"max_iterations", "tol", "stability_policy", "cond_threshold", "unstable_loop_policy", "burn_in"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
    kw = dict(d)
    for key in ("tol", "cond_threshold"):
        if key in kw and kw[key] is not None:
            kw[key] = float(kw[key])
    try:
        return EstimatorConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def initial_parameters(d, structure: ModelStructure, model: Optional[AdditiveModel] = None,
                       where: str = "init") -> np.ndarray:
    """``init`` is a list, or ``{beta: [...], perturb: f, seed: s}``.

    Without ``beta`` the parameters of ``model`` are used.
    """
    if isinstance(d, (list, tuple)):
        beta, frac, seed = _floats(d, where), 0.0, None
    else:
        d = d or {}
        if "beta" in d:
            beta = _floats(d["beta"], where + ".beta")
        elif model is not None:
            beta = pack_parameters(model)
        else:
            raise ConfigError(f"{where}.beta: required when no model is given")
        frac, seed = float(d.get("perturb", 0.0)), d.get("seed")
    if beta.size != structure.n_params:
        raise ConfigError(f"{where}: {beta.size} parameters given, structure needs {structure.n_params}")
    return perturb_parameters(beta, frac, seed) if frac else beta


def plan_from_dict(d: dict) -> ex.MonteCarloPlan:
    sizes = _get(d, "sizes", "plan")
    exp_cfg = dict(_get(d, "experiment", "plan"))
    exp_cfg.setdefault("N", int(sizes[0]))
    experiment = experiment_from_dict(exp_cfg, "plan.experiment")
    try:
        return ex.MonteCarloPlan(
            experiment.replace(N=int(sizes[0])),
            sizes,
            int(d.get("runs", 50)),
            tuple(d.get("variants", ["additive_closed" if experiment.closed_loop else "additive_open"])),
            int(d.get("base_seed", 0)),
            float(d.get("init_fraction", 0.05)),
            estimator_config_from_dict(d.get("estimator"), "plan.estimator"),
            int(d.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"plan: {exc}") from exc


def unfactored_from_dict(d: dict, where: str = "unfactored") -> CtTransferFunction:
    """``{num: [...], den: [...]}`` ascending in ``p``, or ``{model: {...}}``."""
    if "model" in d:
        return additive_to_unfactored(model_from_dict(d["model"], where + ".model"))
    try:
        return CtTransferFunction(_floats(_get(d, "num", where), where + ".num"),
                                  _floats(_get(d, "den", where), where + ".den"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def write_json(path: str, obj) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2)
        fh.write("\n")


def read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such report: {path}")
    with open(path) as fh:
        return json.load(fh)
