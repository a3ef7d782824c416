"""Benchmark systems and the Monte Carlo harness."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .estimator import EstimationError, EstimatorConfig, estimate, perturb_parameters
from .factoring import StructureMismatchError, factor_unfactored
from .lti import (
    AdditiveModel,
    CtSubmodel,
    DtTransferFunction,
    ModelStructure,
    additive_to_unfactored,
    pack_parameters,
    unpack_parameters,
)
from .signals import ExperimentConfig, NoiseModel, SignalSpec, UnstableLoopError, simulate

log = logging.getLogger(__name__)

VARIANTS = ("additive_open", "additive_closed", "srivc_unfactored", "clsrivc_unfactored")

__all__ = [
    "VARIANTS",
    "mode_from_pole",
    "open_loop_model",
    "closed_loop_model",
    "pid_controller",
    "open_loop_experiment",
    "closed_loop_experiment",
    "rigid_body_model",
    "lead_controller",
    "rigid_body_experiment",
    "modal_model",
    "modal_experiment",
    "unfactored_structure",
    "parameter_names",
    "MonteCarloPlan",
    "CellResult",
    "MonteCarloReport",
    "run_montecarlo",
]


def mode_from_pole(pole: complex, gain: float) -> CtSubmodel:
    """Second-order anti-monic submodel ``gain/(a2 p^2 + a1 p + 1)`` with poles ``pole, conj(pole)``."""
    w2 = abs(pole) ** 2
    return CtSubmodel([1.0, -2.0 * pole.real / w2, 1.0 / w2], [gain])


def open_loop_model() -> AdditiveModel:
    """Eighth-order system made of four lightly damped modes."""
    poles = (-0.25 + 1.39j, -0.15 + 3.16j, -0.17 + 5.77j, -0.5 + 9.99j)
    gains = (3.0, 0.4, 0.2, 0.05)
    return AdditiveModel(tuple(mode_from_pole(p, g) for p, g in zip(poles, gains)))


def closed_loop_model() -> AdditiveModel:
    """Fourth-order plant ``3/(0.25p^2+0.25p+1) + 1/(0.025p^2+0.01p+1)``."""
    return AdditiveModel((CtSubmodel([1.0, 0.25, 0.25], [3.0]), CtSubmodel([1.0, 0.01, 0.025], [1.0])))


def pid_controller(h: float = 0.05, kp: float = 0.0115, ki: float = 0.00725, kd: float = 0.00454) -> DtTransferFunction:
    """``kp + ki q/(q-1) + kd (q-1)/q`` over the common denominator ``q(q-1)``."""
    num = P.polyadd(P.polyadd(kp * np.array([0.0, -1.0, 1.0]), ki * np.array([0.0, 0.0, 1.0])),
                    kd * P.polymul([-1.0, 1.0], [-1.0, 1.0]))
    return DtTransferFunction(num, [0.0, -1.0, 1.0], h)


def open_loop_experiment(N: int, seed: int = 0, noise_variance: float = 0.02) -> ExperimentConfig:
    """Unit-variance white input, ``v = (q+0.5)/(q-0.85) e`` with ``var(e) = 0.02``."""
    return ExperimentConfig(
        open_loop_model(),
        SignalSpec("gaussian_white", 1.0),
        NoiseModel([0.5, 1.0], [-0.85, 1.0], noise_variance),
        N, 0.05, seed,
    )


def closed_loop_experiment(N: int, seed: int = 0, noise_variance: float = 0.01) -> ExperimentConfig:
    """PID loop, unit-variance white reference, white output noise."""
    return ExperimentConfig(
        closed_loop_model(),
        SignalSpec("gaussian_white", 1.0),
        NoiseModel(variance=noise_variance),
        N, 0.05, seed, pid_controller(0.05),
    )


def rigid_body_model() -> AdditiveModel:
    """Double integrator ``1/p^2`` plus one resonant mode at 10 rad/s."""
    return AdditiveModel((CtSubmodel([1.0], [1.0]), CtSubmodel([1.0, 0.01, 0.01], [0.5])), integrator_order=2)


def lead_controller(h: float = 0.05, gain: float = 4.0, zero: float = 0.9, pole: float = 0.3) -> DtTransferFunction:
    """First-order lead ``gain (q - zero)/(q - pole)``; stabilizes :func:`rigid_body_model` at the defaults."""
    return DtTransferFunction(gain * np.array([-zero, 1.0]), [-pole, 1.0], h)


def rigid_body_experiment(N: int, seed: int = 0, noise_variance: float = 0.01) -> ExperimentConfig:
    return ExperimentConfig(
        rigid_body_model(),
        SignalSpec("gaussian_white", 1.0),
        NoiseModel(variance=noise_variance),
        N, 0.05, seed, lead_controller(0.05),
    )


def modal_model(input_delay: int = 4) -> AdditiveModel:
    """Four lightly damped modes between 18 and 310 Hz behind a pure delay."""
    freqs = (18.0, 55.0, 140.0, 310.0)
    zetas = (0.02, 0.015, 0.01, 0.02)
    gains = (1.0, -0.4, 0.25, 0.1)
    subs = []
    for f, z, g in zip(freqs, zetas, gains):
        w = 2 * np.pi * f
        subs.append(mode_from_pole(complex(-z * w, w * np.sqrt(1 - z * z)), g))
    return AdditiveModel(tuple(subs), input_delay=input_delay)


def modal_experiment(N: int = 16384, seed: int = 0, noise_variance: float = 0.0) -> ExperimentConfig:
    """Random-phase multisine, flat over 0.5 to 500 Hz, sampled at 4096 Hz."""
    return ExperimentConfig(
        modal_model(),
        SignalSpec("multisine", 1.0, band=(0.5, 500.0), period=4096),
        NoiseModel(variance=noise_variance),
        N, 1.0 / 4096, seed,
    )


def unfactored_structure(structure: ModelStructure) -> ModelStructure:
    """Single-block structure able to represent any model of ``structure``.

    The numerator order is the formal degree of the combined numerator, so
    the parameter count matches the usual unfactored description.
    """
    ns = [n for n, _ in structure.orders]
    ell = structure.integrator_order
    n_tot = sum(ns)
    m_tot = 0
    for i, (n, m) in enumerate(structure.orders):
        deg = m + n_tot - n + (ell if i > 0 else 0)
        m_tot = max(m_tot, deg)
    return ModelStructure(((n_tot, m_tot),), ell, structure.input_delay)


def parameter_names(structure: ModelStructure) -> list[str]:
    names = []
    for i, (n, m) in enumerate(structure.orders, start=1):
        names += [f"a{i}_{j}" for j in range(1, n + 1)]
        names += [f"b{i}_{j}" for j in range(m + 1)]
    return names


def _unfactored_theta(model: AdditiveModel, ustruct: ModelStructure) -> np.ndarray:
    tf = additive_to_unfactored(model)
    ell = model.integrator_order
    core = tf.den[ell:]
    s = core[0]
    n, m = ustruct.orders[0]
    a = np.zeros(n + 1)
    a[: core.size] = core / s
    b = np.zeros(m + 1)
    b[: min(m + 1, tf.num.size)] = tf.num[: m + 1] / s
    return np.concatenate((a[1:], b))


@dataclass
class MonteCarloPlan:
    """Grid of experiments and estimator variants.

    Every run draws one data record that is shared by all variants, so the
    comparison between estimators is paired.
    """

    experiment: ExperimentConfig
    sizes: Sequence[int]
    runs: int = 50
    variants: Sequence[str] = ("additive_open",)
    base_seed: int = 0
    init_fraction: float = 0.05
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    workers: int = 1

    def __post_init__(self):
        self.sizes = tuple(int(n) for n in self.sizes)
        self.variants = tuple(self.variants)
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sample sizes must be strictly increasing")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown estimator variant {v!r}")
            if v.startswith(("additive_closed", "clsrivc")) and self.experiment.controller is None:
                raise ValueError(f"variant {v} needs a closed-loop experiment")

    @property
    def structure(self) -> ModelStructure:
        return self.experiment.model.structure


@dataclass
class CellResult:
    variant: str
    N: int
    run: int
    beta: np.ndarray
    converged: bool
    iterations: int
    termination: str


def _run_variant(plan: MonteCarloPlan, variant: str, data, seed) -> CellResult:
    truth = plan.experiment.model
    structure = truth.structure
    controller = plan.experiment.controller if variant in ("additive_closed", "clsrivc_unfactored") else None
    nan = np.full(structure.n_params, np.nan)
    try:
        if variant.startswith("additive"):
            init = perturb_parameters(pack_parameters(truth), plan.init_fraction, seed)
            res = estimate(data, structure, init, plan.estimator, controller)
            beta = res.beta
        else:
            ustruct = unfactored_structure(structure)
            init = perturb_parameters(_unfactored_theta(truth, ustruct), plan.init_fraction, seed)
            res = estimate(data, ustruct, init, plan.estimator, controller)
            single = unpack_parameters(res.beta, ustruct)
            beta = factor_unfactored(single.submodel_tf(0), structure, reference=truth).beta
        return CellResult(variant, data.N, -1, beta, bool(res.converged), res.iterations, res.termination)
    except (EstimationError, UnstableLoopError, StructureMismatchError, np.linalg.LinAlgError, ValueError) as exc:
        return CellResult(variant, data.N, -1, nan, False, 0, f"error: {exc}")


def _run_cell(args) -> list[CellResult]:
    plan, n_idx, run = args
    N = plan.sizes[n_idx]
    cfg = plan.experiment.replace(N=N, seed=np.random.SeedSequence([plan.base_seed, n_idx, run]))
    data = simulate(cfg)
    out = []
    for v in plan.variants:
        v_idx = VARIANTS.index(v)
        cell = _run_variant(plan, v, data, np.random.SeedSequence([plan.base_seed, v_idx, n_idx, run]))
        cell.run = run
        out.append(cell)
    return out


@dataclass
class MonteCarloReport:
    plan: MonteCarloPlan
    cells: list

    @property
    def names(self) -> list[str]:
        return parameter_names(self.plan.structure)

    def estimates(self, variant: str, N: int, converged_only: bool = True) -> np.ndarray:
        rows = [c.beta for c in self.cells if c.variant == variant and c.N == N and (c.converged or not converged_only)]
        return np.array(rows).reshape(-1, self.plan.structure.n_params)

    def failures(self, variant: str, N: int) -> int:
        return sum(1 for c in self.cells if c.variant == variant and c.N == N and not c.converged)

    def mse_table(self, variant: str) -> np.ndarray:
        """Per-parameter MSE over converged runs, one row per sample size."""
        beta_true = pack_parameters(self.plan.experiment.model)
        out = np.full((len(self.plan.sizes), beta_true.size), np.nan)
        for k, N in enumerate(self.plan.sizes):
            est = self.estimates(variant, N)
            if est.shape[0]:
                out[k] = np.mean((est - beta_true) ** 2, axis=0)
        return out

    def median_sq_error(self, variant: str, N: int) -> np.ndarray:
        beta_true = pack_parameters(self.plan.experiment.model)
        est = self.estimates(variant, N)
        return np.median((est - beta_true) ** 2, axis=0)

    def write(self, outdir: str) -> list[str]:
        """Write ``cells.csv`` and one ``mse_<variant>.csv`` per variant."""
        os.makedirs(outdir, exist_ok=True)
        names = self.names
        paths = []
        path = os.path.join(outdir, "cells.csv")
        with open(path, "w") as fh:
            fh.write(",".join(["variant", "N", "run", "converged", "iterations", "termination"] + names) + "\n")
            for c in self.cells:
                term = c.termination.replace(",", ";").replace("\n", " ")
                vals = [repr(float(x)) for x in c.beta]
                fh.write(",".join([c.variant, str(c.N), str(c.run), str(int(c.converged)), str(c.iterations), term] + vals) + "\n")
        paths.append(path)
        for v in self.plan.variants:
            path = os.path.join(outdir, f"mse_{v}.csv")
            table = self.mse_table(v)
            with open(path, "w") as fh:
                fh.write(",".join(["N"] + names + ["converged", "failures"]) + "\n")
                for k, N in enumerate(self.plan.sizes):
                    ok = self.estimates(v, N).shape[0]
                    fh.write(",".join([str(N)] + [repr(float(x)) for x in table[k]] + [str(ok), str(self.failures(v, N))]) + "\n")
            paths.append(path)
        return paths


def run_montecarlo(plan: MonteCarloPlan, workers: Optional[int] = None) -> MonteCarloReport:
    """Execute every (size, run) cell; results are independent of the worker count."""
    workers = plan.workers if workers is None else workers
    tasks = [(plan, k, run) for k in range(len(plan.sizes)) for run in range(plan.runs)]
    if workers <= 1:
        results = [_run_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    cells = [c for group in results for c in group]
    order = {v: i for i, v in enumerate(plan.variants)}
    cells.sort(key=lambda c: (order[c.variant], c.N, c.run))
    n_fail = sum(1 for c in cells if not c.converged)
    if n_fail:
        log.info("%d of %d cells did not converge", n_fail, len(cells))
    return MonteCarloReport(plan, cells)
