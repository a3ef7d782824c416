"""Consistency and accuracy diagnostics for simulation studies.

Most routines need the true system, so they only make sense on simulated
data. Expectations are replaced by sample averages over the record.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as P

from .estimator import _input_blocks, _int_den, _unit, build_snapshot
from .lti import (
    AdditiveModel,
    DtTransferFunction,
    IdentifiabilityWarning,
    min_pairwise_root_distance,
    sylvester_matrix,
)
from .signals import Dataset, ct_filter_bank, sensitivity_filter, shift

__all__ = [
    "ConsistencyReport",
    "CovarianceReport",
    "IdentifiabilityReport",
    "noise_free_regressor",
    "interpolation_error_matrix",
    "norm_condition",
    "relative_perturbation",
    "check_norm_condition",
    "optimal_instrument",
    "asymptotic_covariance",
    "covariance_report",
    "identifiability_check",
    "residual_variance",
]


def _check_pair(true_model: AdditiveModel, current: AdditiveModel):
    if true_model is None:
        raise ValueError("the true model is required for this diagnostic")
    if true_model.structure != current.structure:
        raise ValueError("true and current models must share the same structure")


def noise_free_regressor(z, true_model: AdditiveModel, current_model: AdditiveModel, h: float) -> np.ndarray:
    """Regressor without noise and interpolation error.

    Block ``i`` is ``[-p^j B_i*/(A_i A_i*) z, j=1..n_i ; p^j/A_i z, j=0..m_i]``
    with ``A_i`` from ``current_model``; ``z`` is ``u`` in open loop and
    ``S_uo* r`` in closed loop.
    """
    _check_pair(true_model, current_model)
    zd = shift(np.asarray(z, dtype=float), current_model.input_delay)
    in_cols, _ = _input_blocks(zd, current_model, h)
    blocks = []
    for i, (s, st) in enumerate(zip(current_model.submodels, true_model.submodels)):
        ell = current_model.integrator(i)
        if s.n:
            den = _int_den(P.polymul(s.a, st.a), ell)
            nums = [P.polymul(_unit(j), st.b) for j in range(1, s.n + 1)]
            blocks.append(-ct_filter_bank(zd, den, nums, h))
        blocks.append(in_cols[i])
    return np.hstack(blocks)


def interpolation_error_matrix(z, true_model: AdditiveModel, current_model: AdditiveModel, h: float) -> np.ndarray:
    """Interpolation error plus residual model bias in the output columns.

    For ``j = 1..n_i`` the entry is the jointly filtered derivative
    ``p^j B_i*/(A_i A_i*) z`` minus the same derivative obtained by first
    sampling ``G_i* z`` and then filtering with ``p^j/A_i``, minus the
    filtered bias ``sum_{l != i} (G_l* - G_l) z``. Input columns are zero.
    """
    _check_pair(true_model, current_model)
    zd = shift(np.asarray(z, dtype=float), current_model.input_delay)
    _, x_true = _input_blocks(zd, true_model, h)
    _, x_cur = _input_blocks(zd, current_model, h)
    bias = [xt - xc for xt, xc in zip(x_true, x_cur)]
    bias_total = np.sum(bias, axis=0)
    blocks = []
    for i, (s, st) in enumerate(zip(current_model.submodels, true_model.submodels)):
        ell = current_model.integrator(i)
        N = zd.size
        if s.n:
            derivs = [_unit(j) for j in range(1, s.n + 1)]
            joint = ct_filter_bank(zd, _int_den(P.polymul(s.a, st.a), ell), [P.polymul(d, st.b) for d in derivs], h)
            seq = ct_filter_bank(x_true[i], s.a, derivs, h)
            others = bias_total - bias[i]
            if np.any(others):
                seq = seq + ct_filter_bank(others, s.a, derivs, h)
            blocks.append(joint - seq)
        blocks.append(np.zeros((N, s.m + 1)))
    return np.hstack(blocks)


@dataclass
class ConsistencyReport:
    """Both sides of the sufficient nonsingularity condition.

    ``satisfied`` is ``delta_norm < sigma_min`` where ``sigma_min`` is the
    smallest singular value of ``mean(phihat phitilde^T)`` and ``delta_norm``
    the spectral norm of ``mean(phihat Delta^T)``. That test depends on the
    units of the parameters, so the unit-free ``relative_perturbation``
    ``||mean(phihat phitilde^T)^-1 mean(phihat Delta^T)||_2`` is reported as
    well; a value below one is also sufficient for nonsingularity.
    ``spectral_radius`` is the largest eigenvalue modulus of the same matrix.
    """

    sigma_min: float
    delta_norm: float
    satisfied: bool
    relative_perturbation: float = float("nan")
    spectral_radius: float = float("nan")
    mode: str = "open"
    sylvester_dets: list = field(default_factory=list)
    normal_matrix_rank: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def norm_condition(PhiHat: np.ndarray, PhiTilde: np.ndarray, Delta: np.ndarray) -> tuple[float, float]:
    """``(sigma_min(mean phihat phitilde^T), ||mean phihat Delta^T||_2)``."""
    N = PhiHat.shape[0]
    s = np.linalg.svd(PhiHat.T @ PhiTilde / N, compute_uv=False)
    d = np.linalg.norm(PhiHat.T @ Delta / N, 2)
    return float(s[-1]), float(d)


def relative_perturbation(PhiHat: np.ndarray, PhiTilde: np.ndarray, Delta: np.ndarray) -> tuple[float, float]:
    """2-norm and spectral radius of ``mean(phihat phitilde^T)^-1 mean(phihat Delta^T)``."""
    N = PhiHat.shape[0]
    try:
        X = np.linalg.solve(PhiHat.T @ PhiTilde / N, PhiHat.T @ Delta / N)
    except np.linalg.LinAlgError:
        return float("inf"), float("inf")
    return float(np.linalg.norm(X, 2)), float(np.abs(np.linalg.eigvals(X)).max())


def check_norm_condition(
    data: Dataset,
    true_model: AdditiveModel,
    current_model: Optional[AdditiveModel] = None,
    controller: Optional[DtTransferFunction] = None,
) -> ConsistencyReport:
    """Evaluate the empirical norm condition at ``current_model`` (default: truth).

    In closed loop (``controller`` given) the instrument is driven by
    ``S_uo r`` of the current model and the noise-free regressor by
    ``S_uo* r`` of the true system.
    """
    current = current_model or true_model
    h = data.h
    if controller is None:
        z_inst = data.u.values
        z_true = data.u.values
        mode = "open"
    else:
        if data.r is None:
            raise ValueError("closed-loop check needs the reference signal")
        z_inst = sensitivity_filter(data.r.values, current, controller, h)
        z_true = sensitivity_filter(data.r.values, true_model, controller, h)
        mode = "closed"
    snap = build_snapshot(data.y.values, data.u.values, current, h, z=z_inst)
    PhiTilde = noise_free_regressor(z_true, true_model, current, h)
    Delta = interpolation_error_matrix(z_true, true_model, current, h)
    smin, dnorm = norm_condition(snap.PhiHat, PhiTilde, Delta)
    rel, rho = relative_perturbation(snap.PhiHat, PhiTilde, Delta)
    ident = identifiability_check(true_model)
    rank = int(np.linalg.matrix_rank(snap.PhiHat.T @ snap.Phi / snap.N))
    return ConsistencyReport(smin, dnorm, bool(dnorm < smin), rel, rho, mode, ident.sylvester_dets, rank)


def optimal_instrument(r_tilde, true_model: AdditiveModel, h: float) -> np.ndarray:
    """Gradient of the model output at the truth, driven by ``r~ = S_uo* r``."""
    return noise_free_regressor(r_tilde, true_model, true_model, h)


def asymptotic_covariance(zeta: np.ndarray, psi: np.ndarray, sigma2: float) -> np.ndarray:
    """Sample version of ``sigma^2 E{zeta psi^T}^-1 E{zeta zeta^T} E{psi zeta^T}^-1``."""
    zeta = np.asarray(zeta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    N = zeta.shape[0]
    Mzp = zeta.T @ psi / N
    Mzz = zeta.T @ zeta / N
    try:
        X = np.linalg.solve(Mzp, Mzz)
        Pm = np.linalg.solve(Mzp, X.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("instrument/gradient moment matrix is singular") from exc
    Pm = sigma2 * Pm
    return 0.5 * (Pm + Pm.T)


@dataclass
class CovarianceReport:
    """Predicted versus Monte Carlo covariance of ``sqrt(N)(beta_hat - beta*)``.

    ``P_iv`` uses the white-noise formula; with coloured noise it is
    indicative only. ``margin`` is the smallest eigenvalue of
    ``sample_cov - P_iv``.
    """

    P_iv: np.ndarray
    sample_cov: Optional[np.ndarray]
    margin: Optional[float]
    runs: int = 0
    note: str = "white-noise formula"

    def to_dict(self) -> dict:
        return {
            "P_iv": np.asarray(self.P_iv).tolist(),
            "sample_cov": None if self.sample_cov is None else np.asarray(self.sample_cov).tolist(),
            "margin": self.margin,
            "runs": self.runs,
            "note": self.note,
        }


def covariance_report(P_iv: np.ndarray, estimates=None, beta_true=None, N: Optional[int] = None) -> CovarianceReport:
    P_iv = 0.5 * (P_iv + P_iv.T)
    if estimates is None or len(estimates) < 2:
        return CovarianceReport(P_iv, None, None, 0 if estimates is None else len(estimates))
    E = np.sqrt(N) * (np.asarray(estimates) - np.asarray(beta_true))
    S = E.T @ E / E.shape[0]
    S = 0.5 * (S + S.T)
    margin = float(np.linalg.eigvalsh(S - P_iv).min())
    return CovarianceReport(P_iv, S, margin, E.shape[0])


def residual_variance(residual) -> float:
    """Plug-in noise variance from the converged output-error residual."""
    return float(np.var(np.asarray(residual, dtype=float)))


@dataclass
class IdentifiabilityReport:
    sylvester_dets: list
    normalized_dets: list
    min_root_distance: float
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings

    def to_dict(self) -> dict:
        return asdict(self)


def identifiability_check(model: AdditiveModel, rel_tol: float = 1e-10) -> IdentifiabilityReport:
    """Coprimeness of each ``(A_i, B_i)`` and separation of the denominators.

    Determinants are also reported divided by the product of the row norms
    (Hadamard bound), which is what ``rel_tol`` is compared against.
    """
    dets, ndets, msgs = [], [], []
    for i, s in enumerate(model.submodels):
        S = sylvester_matrix(-s.b, s.a)
        det = float(abs(np.linalg.det(S)))
        bound = float(np.prod(np.linalg.norm(S, axis=1)))
        nd = det / bound if bound > 0 else 0.0
        dets.append(det)
        ndets.append(nd)
        if nd < rel_tol:
            msgs.append(f"submodel {i + 1}: numerator and denominator nearly share a root (|det S| = {det:.3g})")
    dist = min_pairwise_root_distance(model) if model.K > 1 else float("inf")
    scale = max([1.0] + [float(np.abs(s.poles()).max()) for s in model.submodels if s.n])
    if dist < rel_tol * scale:
        msgs.append(f"denominators share a root (min distance {dist:.3g})")
    for m in msgs:
        warnings.warn(m, IdentifiabilityWarning, stacklevel=2)
    return IdentifiabilityReport(dets, ndets, dist, msgs)
