"""Sampled signals, ZOH prefiltering and open/closed-loop data generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal as sps

from . import _kernels
from .lti import (
    AdditiveModel,
    CtTransferFunction,
    DtTransferFunction,
    _coeffs,
    _zoh,
    ct_realization,
    dt_state_space,
    plant_state_space,
)

__all__ = [
    "SampledSignal",
    "SignalSpec",
    "NoiseModel",
    "ExperimentConfig",
    "Dataset",
    "UnstableLoopError",
    "ct_filter_bank",
    "filter_ct_zoh",
    "derivative_filter_bank",
    "filter_dt",
    "shift",
    "generate_signal",
    "simulate_open_loop",
    "simulate_closed_loop",
    "simulate",
    "closed_loop_matrix",
    "check_loop_stability",
    "sensitivity_filter",
    "snr_db",
]


class UnstableLoopError(ValueError):
    """The plant/controller interconnection has poles on or outside the unit circle."""

    def __init__(self, moduli):
        self.moduli = np.sort(np.asarray(moduli))[::-1]
        super().__init__(
            "closed loop is unstable; offending pole moduli: "
            + ", ".join(f"{m:.6g}" for m in self.moduli)
        )


@dataclass(frozen=True, eq=False)
class SampledSignal:
    """Uniformly sampled real sequence, ``values[k]`` taken at ``t = k h``."""

    values: np.ndarray
    h: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size < 1:
            raise ValueError("a sampled signal needs at least one sample")
        if not self.h > 0:
            raise ValueError("sampling period must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.size

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N) * self.h

    def __len__(self):
        return self.N

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def _other(self, other):
        if isinstance(other, SampledSignal):
            if other.N != self.N or other.h != self.h:
                raise ValueError("signals must share length and sampling period")
            return other.values
        return other

    def __add__(self, other):
        return SampledSignal(self.values + self._other(other), self.h)

    __radd__ = __add__

    def __sub__(self, other):
        return SampledSignal(self.values - self._other(other), self.h)

    def __rsub__(self, other):
        return SampledSignal(self._other(other) - self.values, self.h)

    def __mul__(self, other):
        return SampledSignal(self.values * self._other(other), self.h)

    __rmul__ = __mul__

    def __neg__(self):
        return SampledSignal(-self.values, self.h)


def _values(x) -> np.ndarray:
    if isinstance(x, SampledSignal):
        return x.values
    return np.asarray(x, dtype=float).ravel()


def shift(x: np.ndarray, d: int) -> np.ndarray:
    """Delay by ``d`` samples with zero padding."""
    x = np.asarray(x, dtype=float)
    if d == 0:
        return x
    out = np.zeros_like(x)
    if d < x.size:
        out[d:] = x[:-d]
    return out


def ct_filter_bank(x, den, nums: Sequence, h: float) -> np.ndarray:
    """Outputs of ``nums[j](p)/den(p)`` driven by the ZOH-held samples ``x``.

    All columns come from one simulation of a shared realization of
    ``1/den(p)``; zero initial state.
    """
    x = np.ascontiguousarray(_values(x))
    A, Bv, C, D = ct_realization(den, nums)
    if A.shape[0] == 0:
        return x[:, None] * D[None, :]
    Ad, Bd = _zoh(A, Bv, h)
    X = _kernels.state_sequence(Ad, Bd, x)
    Y = X @ C.T
    if np.any(D):
        Y += x[:, None] * D[None, :]
    return Y


def filter_ct_zoh(x: SampledSignal, f: CtTransferFunction) -> SampledSignal:
    """Sample the response of ``f(p)`` to the zero-order-hold interpolation of ``x``."""
    if not f.is_proper:
        raise ValueError("improper filter cannot be applied under ZOH")
    return SampledSignal(ct_filter_bank(x.values, f.den, [f.num], x.h)[:, 0], x.h)


def derivative_filter_bank(x: SampledSignal, A, ell: int, orders) -> np.ndarray:
    """Columns ``p^j / (p^ell A(p)) x`` for each ``j`` in ``orders``."""
    den = np.concatenate((np.zeros(ell), _coeffs(A)))
    n = den.size - 1
    nums = []
    for j in orders:
        if j > n:
            raise ValueError(f"p^{j}/(p^{ell} A) is improper for deg A = {n - ell}")
        c = np.zeros(j + 1)
        c[j] = 1.0
        nums.append(c)
    return ct_filter_bank(x.values, den, nums, x.h)


def filter_dt(x: SampledSignal, f: DtTransferFunction) -> SampledSignal:
    """Difference-equation output of ``f(q)`` from rest."""
    if not f.is_causal:
        raise ValueError("acausal discrete filter")
    b, a = f.lfilter_coeffs()
    return SampledSignal(sps.lfilter(b, a, x.values), x.h)


@dataclass(frozen=True)
class SignalSpec:
    """Excitation description.

    ``kind`` is one of ``gaussian_white``, ``multisine`` or ``prbs``.
    ``band`` (Hz), ``lines`` and ``period`` (samples) apply to multisines,
    ``hold`` (samples per level) to the binary sequence.
    """

    kind: str = "gaussian_white"
    variance: float = 1.0
    band: Optional[tuple] = None
    lines: Optional[int] = None
    period: Optional[int] = None
    hold: int = 1

    def __post_init__(self):
        if self.kind not in ("gaussian_white", "multisine", "prbs"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")


def _multisine_bins(spec: SignalSpec, period: int, h: float) -> np.ndarray:
    if spec.band is None:
        raise ValueError("multisine requires a frequency band")
    f_lo, f_hi = spec.band
    df = 1.0 / (period * h)
    k_lo = max(1, int(np.ceil(f_lo / df - 1e-9)))
    k_hi = min((period - 1) // 2, int(np.floor(f_hi / df + 1e-9)))
    if k_hi < k_lo:
        raise ValueError(f"empty multisine band {spec.band} Hz at resolution {df:g} Hz")
    bins = np.arange(k_lo, k_hi + 1)
    if spec.lines is not None and spec.lines < bins.size:
        idx = np.unique(np.round(np.linspace(0, bins.size - 1, spec.lines)).astype(int))
        bins = bins[idx]
    return bins


def generate_signal(spec: SignalSpec, N: int, h: float, seed=None) -> SampledSignal:
    """Draw a reproducible excitation of ``N`` samples."""
    rng = np.random.default_rng(seed)
    if spec.kind == "gaussian_white":
        x = rng.normal(0.0, np.sqrt(spec.variance), N)
    elif spec.kind == "prbs":
        hold = max(1, int(spec.hold))
        levels = rng.integers(0, 2, -(-N // hold)) * 2.0 - 1.0
        x = np.repeat(levels, hold)[:N] * np.sqrt(spec.variance)
    else:
        period = int(spec.period or N)
        bins = _multisine_bins(spec, period, h)
        spectrum = np.zeros(period // 2 + 1, dtype=complex)
        spectrum[bins] = np.exp(2j * np.pi * rng.random(bins.size))
        one = np.fft.irfft(spectrum, n=period)
        one *= np.sqrt(spec.variance) / np.sqrt(np.mean(one**2))
        x = np.tile(one, -(-N // period))[:N]
    return SampledSignal(x, h)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """ARMA shaping filter ``num(q)/den(q)`` driven by white noise of variance ``variance``."""

    num: np.ndarray = field(default_factory=lambda: np.ones(1))
    den: np.ndarray = field(default_factory=lambda: np.ones(1))
    variance: float = 0.0

    def __post_init__(self):
        f = DtTransferFunction(self.num, self.den, 1.0)
        if f.den.size > 1 and np.any(np.abs(f.poles()) >= 1):
            raise ValueError("noise model denominator must have roots inside the unit circle")
        if not f.is_causal:
            raise ValueError("noise model must be causal")
        if self.variance < 0:
            raise ValueError("innovation variance must be nonnegative")
        object.__setattr__(self, "num", f.num)
        object.__setattr__(self, "den", f.den)

    def generate(self, N: int, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        e = rng.normal(0.0, np.sqrt(self.variance), N)
        b, a = DtTransferFunction(self.num, self.den, 1.0).lfilter_coeffs()
        return sps.lfilter(b, a, e)

    def stationary_variance(self, n_terms: int = 20000) -> float:
        b, a = DtTransferFunction(self.num, self.den, 1.0).lfilter_coeffs()
        imp = np.zeros(n_terms)
        imp[0] = 1.0
        g = sps.lfilter(b, a, imp)
        return float(self.variance * np.sum(g**2))


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Everything needed to generate one data record.

    In closed loop ``excitation`` describes the reference ``r``, otherwise
    the plant input ``u``.
    """

    model: AdditiveModel
    excitation: SignalSpec
    noise: NoiseModel
    N: int
    h: float
    seed: int = 0
    controller: Optional[DtTransferFunction] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.controller is not None and not np.isclose(self.controller.h, self.h):
            raise ValueError("controller sampling period differs from h")

    @property
    def closed_loop(self) -> bool:
        return self.controller is not None

    def replace(self, **kw) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class Dataset:
    """A data record; ``x`` and ``v`` are kept when known (simulation)."""

    u: SampledSignal
    y: SampledSignal
    r: Optional[SampledSignal] = None
    x: Optional[SampledSignal] = None
    v: Optional[SampledSignal] = None

    @property
    def N(self) -> int:
        return self.u.N

    @property
    def h(self) -> float:
        return self.u.h


def _streams(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(2)


def simulate_open_loop(cfg: ExperimentConfig) -> Dataset:
    """Noisy open-loop response, each submodel simulated exactly under ZOH."""
    model = cfg.model
    if model.integrator_order > 0:
        raise ValueError("open-loop simulation of a model with integrators is unbounded")
    s_u, s_v = _streams(cfg.seed)
    u = generate_signal(cfg.excitation, cfg.N, cfg.h, s_u)
    ud = shift(u.values, model.input_delay)
    x = np.zeros(cfg.N)
    for i in range(model.K):
        tf = model.submodel_tf(i)
        x += ct_filter_bank(ud, tf.den, [tf.num], cfg.h)[:, 0]
    v = cfg.noise.generate(cfg.N, s_v)
    h = cfg.h
    return Dataset(u, SampledSignal(x + v, h), x=SampledSignal(x, h), v=SampledSignal(v, h))


def closed_loop_matrix(model: AdditiveModel, controller: DtTransferFunction, h: float) -> np.ndarray:
    """State matrix of the sampled plant in feedback with ``controller``."""
    Ap, Bp, Cp, Dp = plant_state_space(model, h)
    Ac, Bc, Cc, Dc = dt_state_space(controller)
    den = 1.0 + Dc * Dp
    if den == 0:
        raise ValueError("ill-posed feedback loop (1 + Dc Dp = 0)")
    Kp = -Dc * Cp / den
    Kc = Cc / den
    top = np.hstack((Ap + np.outer(Bp, Kp), np.outer(Bp, Kc)))
    bottom = np.hstack((-np.outer(Bc, Cp + Dp * Kp), Ac - Dp * np.outer(Bc, Kc)))
    return np.vstack((top, bottom))


def check_loop_stability(model: AdditiveModel, controller: DtTransferFunction, h: float) -> np.ndarray:
    """Closed-loop poles; raises :class:`UnstableLoopError` unless all lie inside the unit circle."""
    poles = np.linalg.eigvals(closed_loop_matrix(model, controller, h))
    bad = np.abs(poles) >= 1.0
    if np.any(bad):
        raise UnstableLoopError(np.abs(poles[bad]))
    return poles


def _loop(model, controller, h, r, v):
    Ap, Bp, Cp, Dp = plant_state_space(model, h)
    Ac, Bc, Cc, Dc = dt_state_space(controller)
    return _kernels.feedback_loop(
        np.ascontiguousarray(Ap), Bp, Cp, float(Dp),
        np.ascontiguousarray(Ac), Bc, Cc, float(Dc),
        np.ascontiguousarray(r, dtype=float), np.ascontiguousarray(v, dtype=float),
    )


def sensitivity_filter(r, model: AdditiveModel, controller: DtTransferFunction, h: float) -> np.ndarray:
    """``S_uo(q) r`` for the loop formed by ``model`` and ``controller``."""
    r = _values(r)
    u, _ = _loop(model, controller, h, r, np.zeros_like(r))
    return u


def simulate_closed_loop(cfg: ExperimentConfig) -> Dataset:
    """Exact sampled closed loop ``u = C_d (r - y)``, ``y = G_d u + v``."""
    if cfg.controller is None:
        raise ValueError("closed-loop simulation needs a controller")
    check_loop_stability(cfg.model, cfg.controller, cfg.h)
    s_r, s_v = _streams(cfg.seed)
    r = generate_signal(cfg.excitation, cfg.N, cfg.h, s_r)
    v = cfg.noise.generate(cfg.N, s_v)
    u, y = _loop(cfg.model, cfg.controller, cfg.h, r.values, v)
    h = cfg.h
    return Dataset(
        SampledSignal(u, h), SampledSignal(y, h), r=r,
        x=SampledSignal(y - v, h), v=SampledSignal(v, h),
    )


def simulate(cfg: ExperimentConfig) -> Dataset:
    return simulate_closed_loop(cfg) if cfg.closed_loop else simulate_open_loop(cfg)


def snr_db(x, v) -> float:
    """``10 log10(var(x) / var(v))``."""
    return float(10.0 * np.log10(np.var(_values(x)) / np.var(_values(v))))
