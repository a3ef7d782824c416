"""Refined instrumental-variable iterations for additive continuous-time models.

Each submodel ``i`` contributes a block of regressor columns built from its
own residual output ``y - sum_{l != i} G_l u`` and a block of instrument
columns (the gradient of the model output, or its closed-loop counterpart
driven by ``S_uo(q) r``). One linear solve per iteration yields a
``P x K`` matrix whose block diagonal is the next parameter vector.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as P

from .lti import (
    AdditiveModel,
    DtTransferFunction,
    ModelStructure,
    pack_parameters,
    reflect_unstable_roots,
    unpack_parameters,
)
from .signals import (
    Dataset,
    SampledSignal,
    UnstableLoopError,
    check_loop_stability,
    ct_filter_bank,
    sensitivity_filter,
    shift,
)

__all__ = [
    "EstimatorConfig",
    "RegressionSnapshot",
    "EstimationResult",
    "EstimationError",
    "SingularNormalMatrixError",
    "UnstableModelError",
    "residual_outputs",
    "build_regressor",
    "build_instrument_open",
    "build_instrument_closed",
    "build_snapshot",
    "iterate_once",
    "off_block_ratio",
    "estimate",
    "perturb_parameters",
    "stabilize",
    "model_output",
]

log = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    """Numerical failure of the iterations."""


class SingularNormalMatrixError(EstimationError):
    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"modified normal matrix is singular or ill conditioned (cond = {cond:.3g})")


class UnstableModelError(EstimationError):
    pass


@dataclass
class EstimatorConfig:
    """Iteration controls.

    ``tol`` defaults to ``1e-10`` in open loop and ``1e-7`` in closed loop.
    ``cond_threshold`` applies to the equilibrated modified normal matrix.
    """

    max_iterations: int = 100
    tol: Optional[float] = None
    stability_policy: str = "reflect"
    cond_threshold: float = 1e12
    unstable_loop_policy: str = "error"
    burn_in: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.stability_policy not in ("reflect", "error"):
            raise ValueError(f"unknown stability policy {self.stability_policy!r}")
        if self.unstable_loop_policy not in ("error", "reuse_last_sensitivity"):
            raise ValueError(f"unknown closed-loop policy {self.unstable_loop_policy!r}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")

    def tolerance(self, closed: bool) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-7 if closed else 1e-10


@dataclass(frozen=True, eq=False)
class RegressionSnapshot:
    """Regressor, instrument and filtered residual outputs at one iterate."""

    Phi: np.ndarray
    PhiHat: np.ndarray
    Upsilon: np.ndarray
    structure: ModelStructure
    residual: Optional[np.ndarray] = None

    def __post_init__(self):
        N, p = self.Phi.shape
        if self.PhiHat.shape != (N, p) or self.Upsilon.shape != (N, self.structure.K):
            raise ValueError("inconsistent snapshot dimensions")
        if p != self.structure.n_params:
            raise ValueError("regressor width does not match the structure")

    @property
    def N(self) -> int:
        return self.Phi.shape[0]

    @property
    def P(self) -> int:
        return self.Phi.shape[1]


@dataclass
class EstimationResult:
    beta: np.ndarray
    model: AdditiveModel
    converged: bool
    iterations: int
    trajectory: np.ndarray
    condition_numbers: list = field(default_factory=list)
    off_block: list = field(default_factory=list)
    termination: str = ""
    orthogonality: float = float("nan")
    B_full: Optional[np.ndarray] = None
    mode: str = "open"

    @property
    def srivc_equivalent(self) -> bool:
        return self.model.K == 1


def _unit(j: int) -> np.ndarray:
    c = np.zeros(j + 1)
    c[j] = 1.0
    return c


def _int_den(a: np.ndarray, ell: int) -> np.ndarray:
    return np.concatenate((np.zeros(ell), a))


def stabilize(model: AdditiveModel, policy: str = "reflect") -> AdditiveModel:
    """Apply the stability policy to every submodel denominator."""
    subs = []
    for i, s in enumerate(model.submodels):
        if s.n and np.any(s.poles().real >= 0):
            if policy == "error":
                raise UnstableModelError(f"submodel {i + 1} has poles {s.poles()} outside the open LHP")
            s = reflect_unstable_roots(s)
        subs.append(s)
    return model.replace_submodels(subs)


def _require_stable(model: AdditiveModel):
    for i, s in enumerate(model.submodels):
        if s.n and np.any(s.poles().real >= 0):
            raise UnstableModelError(f"submodel {i + 1} denominator is not strictly stable")


def _input_blocks(ud, model, h):
    """Per submodel: columns ``p^j/(p^l A_i) u`` and the output ``G_i u``."""
    cols, outs = [], []
    for i, s in enumerate(model.submodels):
        nums = [_unit(j) for j in range(s.m + 1)] + [s.b]
        Y = ct_filter_bank(ud, _int_den(s.a, model.integrator(i)), nums, h)
        cols.append(Y[:, : s.m + 1])
        outs.append(Y[:, s.m + 1])
    return cols, outs


def _gradient_output_block(zd, sub, ell, h):
    """Columns ``-p^j B/(p^l A^2) z`` for ``j = 1..n``."""
    if sub.n == 0:
        return np.zeros((zd.size, 0))
    nums = [P.polymul(_unit(j), sub.b) for j in range(1, sub.n + 1)]
    return -ct_filter_bank(zd, _int_den(P.polymul(sub.a, sub.a), ell), nums, h)


def build_snapshot(y, u, model: AdditiveModel, h: float, z=None, burn_in: int = 0) -> RegressionSnapshot:
    """Assemble regressor, instrument and ``Upsilon`` at the given model.

    ``z`` drives the instrument; ``None`` selects the open-loop gradient
    instrument driven by ``u``. All inputs are delayed by the model's
    input delay before filtering.
    """
    y = np.asarray(y, dtype=float)
    d = model.input_delay
    ud = shift(np.asarray(u, dtype=float), d)
    zd = None if z is None else shift(np.asarray(z, dtype=float), d)
    in_cols, outs = _input_blocks(ud, model, h)
    total = np.sum(outs, axis=0)
    phi, phihat, ups = [], [], []
    for i, s in enumerate(model.submodels):
        ell = model.integrator(i)
        yt = y - (total - outs[i])
        Yf = ct_filter_bank(yt, s.a, [_unit(j) for j in range(s.n + 1)], h)
        ups.append(Yf[:, 0])
        phi.append(-Yf[:, 1:])
        phi.append(in_cols[i])
        src = ud if zd is None else zd
        phihat.append(_gradient_output_block(src, s, ell, h))
        if zd is None:
            phihat.append(in_cols[i])
        else:
            nums = [_unit(j) for j in range(s.m + 1)]
            phihat.append(ct_filter_bank(zd, _int_den(s.a, ell), nums, h))
    sl = slice(burn_in, None)
    return RegressionSnapshot(
        np.hstack(phi)[sl], np.hstack(phihat)[sl], np.column_stack(ups)[sl],
        model.structure, residual=(y - total)[sl],
    )


def residual_outputs(y: SampledSignal, u: SampledSignal, model: AdditiveModel):
    """Residual outputs ``y~_i`` and their filtered versions ``y_{f,i} = y~_i / A_i``."""
    _require_stable(model)
    h = y.h
    ud = shift(u.values, model.input_delay)
    _, outs = _input_blocks(ud, model, h)
    total = np.sum(outs, axis=0)
    yt, yf = [], []
    for i, s in enumerate(model.submodels):
        r = y.values - (total - outs[i])
        yt.append(SampledSignal(r, h))
        yf.append(SampledSignal(ct_filter_bank(r, s.a, [_unit(0)], h)[:, 0], h))
    return yt, yf


def build_regressor(y: SampledSignal, u: SampledSignal, model: AdditiveModel) -> np.ndarray:
    _require_stable(model)
    return build_snapshot(y.values, u.values, model, y.h).Phi


def build_instrument_open(u: SampledSignal, model: AdditiveModel) -> np.ndarray:
    """Gradient of the simulated model output with respect to ``beta``."""
    _require_stable(model)
    d = model.input_delay
    ud = shift(u.values, d)
    in_cols, _ = _input_blocks(ud, model, u.h)
    blocks = []
    for i, s in enumerate(model.submodels):
        blocks.append(_gradient_output_block(ud, s, model.integrator(i), u.h))
        blocks.append(in_cols[i])
    return np.hstack(blocks)


def build_instrument_closed(r: SampledSignal, model: AdditiveModel, controller: DtTransferFunction) -> np.ndarray:
    """Closed-loop instrument: the open-loop filter bank applied to ``S_uo(q) r``."""
    _require_stable(model)
    check_loop_stability(model, controller, r.h)
    z = sensitivity_filter(r.values, model, controller, r.h)
    if np.any(r.values) and not np.any(z):
        warnings.warn("S_uo r is identically zero; the closed-loop instrument is degenerate")
    return build_instrument_open(SampledSignal(z, r.h), model)


def _solve(snap: RegressionSnapshot, cond_threshold: float = np.inf):
    N = snap.N
    M = snap.PhiHat.T @ snap.Phi / N
    R = snap.PhiHat.T @ snap.Upsilon / N
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(R))):
        raise EstimationError("non-finite entries in the normal equations")
    # equilibrate rows/columns so the condition number reflects conditioning, not units
    dr = np.sqrt(np.einsum("ij,ij->j", snap.PhiHat, snap.PhiHat) / N)
    dc = np.sqrt(np.einsum("ij,ij->j", snap.Phi, snap.Phi) / N)
    if np.any(dr == 0) or np.any(dc == 0):
        raise SingularNormalMatrixError(np.inf)
    Ms = M / dr[:, None] / dc[None, :]
    cond = float(np.linalg.cond(Ms))
    if not np.isfinite(cond) or cond > cond_threshold:
        raise SingularNormalMatrixError(cond)
    B = np.linalg.solve(Ms, R / dr[:, None]) / dc[:, None]
    return B, cond


def _block_diagonal(B: np.ndarray, structure: ModelStructure) -> np.ndarray:
    return np.concatenate([B[sl, i] for i, sl in enumerate(structure.slices)])


def off_block_ratio(B: np.ndarray, structure: ModelStructure) -> float:
    """Largest off-block-diagonal magnitude of ``B`` relative to its Frobenius norm."""
    E = B.copy()
    for i, sl in enumerate(structure.slices):
        E[sl, i] = 0.0
    nrm = np.linalg.norm(B)
    return float(np.abs(E).max() / nrm) if nrm > 0 else 0.0


def iterate_once(snapshot: RegressionSnapshot, cond_threshold: float = 1e12):
    """One refined IV step; returns the full solution matrix and the next ``beta``."""
    B, _ = _solve(snapshot, cond_threshold)
    return B, _block_diagonal(B, snapshot.structure)


def model_output(u, model: AdditiveModel, h: float) -> np.ndarray:
    """Simulated noise-free output ``sum_i G_i(p) u`` including the input delay."""
    ud = shift(np.asarray(u, dtype=float), model.input_delay)
    _, outs = _input_blocks(ud, model, h)
    return np.sum(outs, axis=0)


def estimate(
    data: Dataset,
    structure: ModelStructure,
    beta_init,
    config: Optional[EstimatorConfig] = None,
    controller: Optional[DtTransferFunction] = None,
) -> EstimationResult:
    """Iterate the additive refined IV estimator from ``beta_init``.

    Passing ``controller`` selects the closed-loop variant, which needs the
    reference ``data.r``.
    """
    config = config or EstimatorConfig()
    closed = controller is not None
    if closed and data.r is None:
        raise ValueError("closed-loop estimation needs the reference signal")
    h = data.h
    y, u = data.y.values, data.u.values
    r = data.r.values if closed else None
    tol = config.tolerance(closed)

    model = stabilize(unpack_parameters(beta_init, structure), config.stability_policy)
    beta = pack_parameters(model)
    trajectory = [beta]
    conds, offs = [], []
    last_z = None
    converged = False
    termination = "max_iterations"
    B = None

    def drive(model):
        nonlocal last_z
        if not closed:
            return None
        try:
            check_loop_stability(model, controller, h)
        except UnstableLoopError:
            if config.unstable_loop_policy == "reuse_last_sensitivity" and last_z is not None:
                log.warning("closed loop unstable at current iterate; reusing previous S_uo r")
                return last_z
            raise
        last_z = sensitivity_filter(r, model, controller, h)
        return last_z

    for it in range(config.max_iterations):
        snap = build_snapshot(y, u, model, h, z=drive(model), burn_in=config.burn_in)
        B, cond = _solve(snap, np.inf)
        if cond > config.cond_threshold:
            warnings.warn(f"ill-conditioned normal matrix at iteration {it + 1} (cond = {cond:.3g})")
        nxt = _block_diagonal(B, structure)
        if not np.all(np.isfinite(nxt)):
            raise EstimationError(f"non-finite parameter estimate at iteration {it + 1}")
        model = stabilize(unpack_parameters(nxt, structure), config.stability_policy)
        nxt = pack_parameters(model)
        conds.append(cond)
        offs.append(off_block_ratio(B, structure))
        trajectory.append(nxt)
        change = np.linalg.norm(nxt - beta) / max(np.linalg.norm(beta), np.finfo(float).tiny)
        beta = nxt
        if change < tol:
            converged = True
            termination = "converged"
            break

    final = build_snapshot(y, u, model, h, z=drive(model), burn_in=config.burn_in)
    ortho = float(np.abs(final.PhiHat.T @ final.residual / final.N).max())
    return EstimationResult(
        beta=beta,
        model=model,
        converged=converged,
        iterations=len(trajectory) - 1,
        trajectory=np.array(trajectory),
        condition_numbers=conds,
        off_block=offs,
        termination=termination,
        orthogonality=ortho,
        B_full=B,
        mode="closed" if closed else "open",
    )


def perturb_parameters(beta, fraction: float, seed=None) -> np.ndarray:
    """Elementwise ``beta * (1 + U(-fraction, fraction))``."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    return beta * (1.0 + rng.uniform(-fraction, fraction, beta.shape))
