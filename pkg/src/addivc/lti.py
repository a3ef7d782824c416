"""Polynomials, transfer functions and additive model parametrization.

Coefficient arrays are stored in ascending degree order throughout
(``c[0]`` is the constant term). Denominators of continuous-time submodels
are anti-monic, i.e. ``A(0) = 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial import polynomial as P
from scipy import linalg, signal

__all__ = [
    "Polynomial",
    "CtSubmodel",
    "ModelStructure",
    "AdditiveModel",
    "CtTransferFunction",
    "DtTransferFunction",
    "IdentifiabilityWarning",
    "poly_roots",
    "is_ct_stable",
    "reflect_unstable_roots",
    "ct_realization",
    "zoh_state_space",
    "zoh_discretize",
    "additive_to_unfactored",
    "sylvester_matrix",
    "pack_parameters",
    "unpack_parameters",
    "model_to_dt",
    "plant_state_space",
    "dt_state_space",
    "sensitivity_function",
]

IMAG_AXIS_EPS = 1e-8
SHARED_ROOT_TOL = 1e-10


class IdentifiabilityWarning(UserWarning):
    """Near-common roots between polynomials that should be coprime."""


def _coeffs(p) -> np.ndarray:
    if isinstance(p, Polynomial):
        return np.asarray(p.coef, dtype=float)
    return np.atleast_1d(np.asarray(p, dtype=float))


def _trim(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return np.zeros(1)
    return c[: nz[-1] + 1]


def _readonly(c) -> np.ndarray:
    c = np.array(c, dtype=float)
    c.setflags(write=False)
    return c


def poly_roots(p) -> np.ndarray:
    """Roots of a polynomial given in ascending coefficient order."""
    c = _trim(_coeffs(p))
    if not np.any(c):
        raise ValueError("zero polynomial has no well-defined roots")
    if c.size < 2:
        raise ValueError("polynomial must have degree >= 1")
    return P.polyroots(c)


def is_ct_stable(p) -> bool:
    """True when every root lies strictly in the open left half-plane."""
    return bool(np.all(poly_roots(p).real < 0))


def _from_roots_antimonic(roots: np.ndarray) -> np.ndarray:
    c = np.real_if_close(P.polyfromroots(roots), tol=1e6).real
    return c / c[0]


@dataclass(frozen=True, eq=False)
class CtSubmodel:
    """One additive term ``B(p)/A(p)`` with ``A(0) = 1``.

    Parameters
    ----------
    a : array_like
        Denominator coefficients ``[1, a_1, ..., a_n]``.
    b : array_like
        Numerator coefficients ``[b_0, ..., b_m]``.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = _readonly(self.a)
        b = _readonly(self.b)
        if a.ndim != 1 or b.ndim != 1 or a.size < 1 or b.size < 1:
            raise ValueError("coefficient arrays must be non-empty vectors")
        if a[0] != 1.0:
            raise ValueError(f"denominator must be anti-monic, got A(0) = {a[0]!r}")
        if b.size > a.size:
            raise ValueError("submodel must be proper (m <= n)")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_theta(cls, theta, n: int, m: int) -> "CtSubmodel":
        theta = np.asarray(theta, dtype=float)
        if theta.size != n + m + 1:
            raise ValueError(f"expected {n + m + 1} parameters, got {theta.size}")
        return cls(np.concatenate(([1.0], theta[:n])), theta[n:].copy())

    @classmethod
    def from_polynomials(cls, A, B) -> "CtSubmodel":
        """Build from arbitrary ``A``, ``B``; both are rescaled so ``A(0) = 1``."""
        a = _coeffs(A)
        b = _coeffs(B)
        if a[0] == 0:
            raise ValueError("A(0) = 0 cannot be normalized to anti-monic form")
        return cls(a / a[0], b / a[0])

    @property
    def n(self) -> int:
        return self.a.size - 1

    @property
    def m(self) -> int:
        return self.b.size - 1

    @property
    def A(self) -> Polynomial:
        return Polynomial(self.a)

    @property
    def B(self) -> Polynomial:
        return Polynomial(self.b)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate((self.a[1:], self.b))

    def poles(self) -> np.ndarray:
        return poly_roots(self.a) if self.n > 0 else np.zeros(0, dtype=complex)

    def tf(self, integrator_order: int = 0) -> "CtTransferFunction":
        den = np.concatenate((np.zeros(integrator_order), self.a))
        return CtTransferFunction(self.b, den)

    def __eq__(self, other):
        if not isinstance(other, CtSubmodel):
            return NotImplemented
        return np.array_equal(self.a, other.a) and np.array_equal(self.b, other.b)

    def __repr__(self):
        return f"CtSubmodel(a={self.a.tolist()}, b={self.b.tolist()})"


def reflect_unstable_roots(sub: CtSubmodel) -> CtSubmodel:
    """Mirror right half-plane denominator roots into the left half-plane.

    Stable submodels are returned unchanged. Roots exactly on the imaginary
    axis are nudged to real part ``-1e-8``; a root at the origin is an error.
    """
    if sub.n == 0:
        return sub
    roots = sub.poles()
    if np.all(roots.real < 0):
        return sub
    if np.any(roots == 0):
        raise ValueError("denominator root at the origin cannot be reflected")
    re = np.where(roots.real > 0, -roots.real, roots.real)
    re = np.where(re == 0, -IMAG_AXIS_EPS, re)
    new_roots = re + 1j * roots.imag
    return CtSubmodel(_from_roots_antimonic(new_roots), sub.b)


@dataclass(frozen=True)
class ModelStructure:
    """Orders ``(n_i, m_i)`` per submodel, integrator order and input delay."""

    orders: tuple
    integrator_order: int = 0
    input_delay: int = 0

    def __post_init__(self):
        orders = tuple((int(n), int(m)) for n, m in self.orders)
        if not orders:
            raise ValueError("at least one submodel is required")
        for n, m in orders:
            if n < 0 or m < 0 or m > n:
                raise ValueError(f"invalid submodel order (n={n}, m={m})")
        if self.integrator_order < 0 or self.input_delay < 0:
            raise ValueError("integrator order and delay must be nonnegative")
        object.__setattr__(self, "orders", orders)

    @property
    def K(self) -> int:
        return len(self.orders)

    @property
    def n_params(self) -> int:
        return sum(n + m + 1 for n, m in self.orders)

    @property
    def slices(self) -> list[slice]:
        out, start = [], 0
        for n, m in self.orders:
            out.append(slice(start, start + n + m + 1))
            start += n + m + 1
        return out

    def integrator(self, i: int) -> int:
        return self.integrator_order if i == 0 else 0


@dataclass(frozen=True, eq=False)
class AdditiveModel:
    """Sum of continuous-time submodels.

    The first submodel may carry ``integrator_order`` poles at the origin,
    ``G_1 = B_1 / (p^l A_1)``. The plant input is delayed by ``input_delay``
    samples.
    """

    submodels: tuple
    integrator_order: int = 0
    input_delay: int = 0
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        subs = tuple(self.submodels)
        if not subs:
            raise ValueError("an additive model needs at least one submodel")
        object.__setattr__(self, "submodels", subs)
        if self.integrator_order < 0 or self.input_delay < 0:
            raise ValueError("integrator order and delay must be nonnegative")
        biproper = sum(1 for i, s in enumerate(subs) if s.n + (self.integrator_order if i == 0 else 0) == s.m)
        if biproper > 1:
            raise ValueError("at most one submodel may have as many zeros as poles")
        if self.check and len(subs) > 1:
            d = min_pairwise_root_distance(self)
            scale = max(1.0, max((np.abs(s.poles()).max() for s in subs if s.n), default=1.0))
            if d < SHARED_ROOT_TOL * scale:
                warnings.warn(
                    f"submodel denominators share a root (distance {d:.3g})",
                    IdentifiabilityWarning,
                    stacklevel=2,
                )

    @property
    def K(self) -> int:
        return len(self.submodels)

    @property
    def structure(self) -> ModelStructure:
        return ModelStructure(
            tuple((s.n, s.m) for s in self.submodels), self.integrator_order, self.input_delay
        )

    def integrator(self, i: int) -> int:
        return self.integrator_order if i == 0 else 0

    def submodel_tf(self, i: int) -> "CtTransferFunction":
        return self.submodels[i].tf(self.integrator(i))

    def replace_submodels(self, subs) -> "AdditiveModel":
        return AdditiveModel(tuple(subs), self.integrator_order, self.input_delay, check=False)

    def __eq__(self, other):
        if not isinstance(other, AdditiveModel):
            return NotImplemented
        return (
            self.integrator_order == other.integrator_order
            and self.input_delay == other.input_delay
            and self.submodels == other.submodels
        )

    def __repr__(self):
        return (
            f"AdditiveModel({list(self.submodels)!r}, integrator_order={self.integrator_order}, "
            f"input_delay={self.input_delay})"
        )


def min_pairwise_root_distance(model: AdditiveModel) -> float:
    """Smallest distance between roots of two different submodel denominators."""
    roots = [s.poles() for s in model.submodels]
    best = np.inf
    for i in range(len(roots)):
        for j in range(i + 1, len(roots)):
            if roots[i].size and roots[j].size:
                best = min(best, np.abs(roots[i][:, None] - roots[j][None, :]).min())
    return float(best)


def pack_parameters(model: AdditiveModel) -> np.ndarray:
    """Stack ``[a_1..a_n, b_0..b_m]`` of each submodel into one vector."""
    return np.concatenate([s.theta for s in model.submodels])


def unpack_parameters(beta, structure: ModelStructure, check: bool = False) -> AdditiveModel:
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or beta.size != structure.n_params:
        raise ValueError(
            f"parameter vector has length {beta.size}, structure needs {structure.n_params}"
        )
    subs = [
        CtSubmodel.from_theta(beta[sl], n, m)
        for sl, (n, m) in zip(structure.slices, structure.orders)
    ]
    return AdditiveModel(tuple(subs), structure.integrator_order, structure.input_delay, check=check)


@dataclass(frozen=True, eq=False)
class CtTransferFunction:
    """Rational function ``num(p)/den(p)`` in the derivative operator."""

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        num = _readonly(_trim(_coeffs(self.num)))
        den = _readonly(_trim(_coeffs(self.den)))
        if not np.any(den):
            raise ValueError("denominator is identically zero")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @property
    def is_proper(self) -> bool:
        return self.num.size <= self.den.size

    def __call__(self, s):
        return P.polyval(s, self.num) / P.polyval(s, self.den)

    def freqresp(self, w):
        return self(1j * np.asarray(w, dtype=float))

    def poles(self) -> np.ndarray:
        return poly_roots(self.den) if self.den.size > 1 else np.zeros(0, dtype=complex)


@dataclass(frozen=True, eq=False)
class DtTransferFunction:
    """Rational function ``num(q)/den(q)`` in the forward shift, monic denominator."""

    num: np.ndarray
    den: np.ndarray
    h: float

    def __post_init__(self):
        num = _trim(_coeffs(self.num))
        den = _trim(_coeffs(self.den))
        if not np.any(den):
            raise ValueError("denominator is identically zero")
        if self.h <= 0:
            raise ValueError("sampling period must be positive")
        lead = den[-1]
        object.__setattr__(self, "num", _readonly(num / lead))
        object.__setattr__(self, "den", _readonly(den / lead))

    @property
    def is_causal(self) -> bool:
        return self.num.size <= self.den.size

    def __call__(self, z):
        return P.polyval(z, self.num) / P.polyval(z, self.den)

    def freqresp(self, w):
        return self(np.exp(1j * np.asarray(w, dtype=float) * self.h))

    def poles(self) -> np.ndarray:
        return poly_roots(self.den) if self.den.size > 1 else np.zeros(0, dtype=complex)

    def lfilter_coeffs(self) -> tuple[np.ndarray, np.ndarray]:
        """``(b, a)`` in powers of ``q^-1`` as expected by :func:`scipy.signal.lfilter`."""
        n = self.den.size
        b = np.zeros(n)
        b[n - self.num.size:] = self.num[::-1]
        return b, self.den[::-1].copy()


def ct_realization(den, nums: Sequence, scale: bool = True):
    """Controllable canonical realization sharing one denominator.

    Returns ``(A, B, C, D)`` where row ``j`` of ``C`` and entry ``j`` of ``D``
    realize ``nums[j](p) / den(p)``. The states are ``p^k w / omega^k`` with
    ``w = x / den(p)``; ``omega`` is a characteristic frequency of ``den``
    that keeps high-order realizations well scaled.
    """
    d = _trim(_coeffs(den))
    n = d.size - 1
    nums = [_coeffs(c) for c in nums]
    for c in nums:
        if _trim(c).size > n + 1:
            raise ValueError("improper filter: numerator degree exceeds denominator degree")
    omega = 1.0
    if scale and n > 0:
        nz = np.flatnonzero(d[:-1])
        if nz.size:
            k0 = nz[0]
            omega = abs(d[k0] / d[n]) ** (1.0 / (n - k0))
            if not np.isfinite(omega) or omega == 0:
                omega = 1.0
    sig = omega ** np.arange(n)
    A = np.zeros((n, n))
    Bv = np.zeros(n)
    if n:
        A[np.arange(n - 1), np.arange(1, n)] = omega
        A[n - 1, :] = -d[:n] * sig / (d[n] * sig[-1])
        Bv[n - 1] = 1.0 / (d[n] * sig[-1])
    C = np.zeros((len(nums), n))
    D = np.zeros(len(nums))
    for j, c in enumerate(nums):
        c = np.concatenate((c, np.zeros(max(0, n + 1 - c.size))))[: n + 1]
        C[j] = c[:n] * sig
        if c[n] != 0:
            D[j] = c[n] / d[n]
            C[j] -= c[n] * d[:n] * sig / d[n]
    return A, Bv, C, D


def _zoh(A, Bv, h):
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = Bv
    E = linalg.expm(M * h)
    return E[:n, :n], E[:n, n].copy()


def zoh_state_space(tf: CtTransferFunction, h: float, scale: bool = True):
    """ZOH-equivalent discrete state-space ``(Ad, Bd, C, D)`` of ``tf``."""
    if h <= 0:
        raise ValueError("sampling period must be positive")
    if not tf.is_proper:
        raise ValueError("improper transfer function cannot be ZOH-discretized")
    A, Bv, C, D = ct_realization(tf.den, [tf.num], scale=scale)
    Ad, Bd = _zoh(A, Bv, h)
    return Ad, Bd, C[0], D[0]


def _ss_to_dt(Ad, Bd, C, D, h) -> DtTransferFunction:
    n = Ad.shape[0]
    if n == 0:
        return DtTransferFunction([D], [1.0], h)
    num, den = signal.ss2tf(Ad, Bd.reshape(-1, 1), np.atleast_2d(C), np.atleast_1d(D))
    return DtTransferFunction(np.asarray(num[0])[::-1], np.asarray(den)[::-1], h)


def zoh_discretize(tf: CtTransferFunction, h: float) -> DtTransferFunction:
    """Step-invariant (ZOH) equivalent of a proper continuous rational function."""
    return _ss_to_dt(*zoh_state_space(tf, h), h)


def additive_to_unfactored(model: AdditiveModel) -> CtTransferFunction:
    """Combine all submodels over the common denominator ``p^l prod A_i``."""
    dens = [np.concatenate((np.zeros(model.integrator(i)), s.a)) for i, s in enumerate(model.submodels)]
    den = np.ones(1)
    for d in dens:
        den = P.polymul(den, d)
    num = np.zeros(1)
    for i, s in enumerate(model.submodels):
        term = s.b
        for j, d in enumerate(dens):
            if j != i:
                term = P.polymul(term, d)
        num = P.polyadd(num, term)
    return CtTransferFunction(num, den)


def sylvester_matrix(neg_b, a) -> np.ndarray:
    """Sylvester matrix ``S(-B, A)`` of size ``n+m+1``.

    Rows ``1..n`` hold the coefficients of ``p^j (-B)(p)``, rows ``n+1..n+m+1``
    those of ``p^j A(p)`` for ``j = 0..m``, all in descending powers from
    ``p^(n+m)`` down to ``1``. The formal degrees are taken from the array
    lengths. With ``A(0) != 0`` the determinant vanishes exactly when ``A`` and
    ``B`` have a common root.
    """
    nb = _coeffs(neg_b)
    a = _coeffs(a)
    n, m = a.size - 1, nb.size - 1
    size = n + m + 1
    S = np.zeros((size, size))
    for j in range(1, n + 1):
        row = np.zeros(size)
        row[j: j + m + 1] = nb
        S[j - 1] = row[::-1]
    for j in range(m + 1):
        row = np.zeros(size)
        row[j: j + n + 1] = a
        S[n + j] = row[::-1]
    return S


def _delay_den(d: int) -> np.ndarray:
    c = np.zeros(d + 1)
    c[d] = 1.0
    return c


def model_to_dt(model: AdditiveModel, h: float) -> DtTransferFunction:
    """ZOH equivalent of the whole additive model, including the input delay."""
    g = zoh_discretize(additive_to_unfactored(model), h)
    if model.input_delay:
        return DtTransferFunction(g.num, P.polymul(g.den, _delay_den(model.input_delay)), h)
    return g


def _series_delay(Ad, Bd, C, D, d):
    """Prepend a ``d``-sample shift register to a discrete SISO system."""
    if d == 0:
        return Ad, Bd, C, D
    n = Ad.shape[0]
    A = np.zeros((n + d, n + d))
    A[:n, :n] = Ad
    A[:n, n + d - 1] = Bd
    for k in range(1, d):
        A[n + k, n + k - 1] = 1.0
    B = np.zeros(n + d)
    B[n] = 1.0
    Cn = np.zeros(n + d)
    Cn[:n] = C
    Cn[n + d - 1] = D
    return A, B, Cn, 0.0


def plant_state_space(model: AdditiveModel, h: float):
    """Discrete state-space of the sampled plant, submodel blocks plus delay chain."""
    blocks = [zoh_state_space(model.submodel_tf(i), h) for i in range(model.K)]
    Ad = linalg.block_diag(*[b[0] for b in blocks]) if blocks else np.zeros((0, 0))
    Ad = np.atleast_2d(Ad) if Ad.size else np.zeros((0, 0))
    Bd = np.concatenate([b[1] for b in blocks])
    C = np.concatenate([np.atleast_1d(b[2]) for b in blocks])
    D = float(sum(b[3] for b in blocks))
    return _series_delay(Ad, Bd, C, D, model.input_delay)


def dt_state_space(f: DtTransferFunction):
    """State-space realization ``(A, B, C, D)`` of a causal discrete transfer function."""
    if not f.is_causal:
        raise ValueError("acausal discrete transfer function")
    b, a = f.lfilter_coeffs()
    A, B, C, D = signal.tf2ss(b, a)
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0), float(np.ravel(D)[0])
    return A, B[:, 0].copy(), C[0].copy(), float(np.ravel(D)[0])


def sensitivity_function(plant: DtTransferFunction, controller: DtTransferFunction) -> DtTransferFunction:
    """Map from reference to plant input, ``C_d / (1 + G_d C_d)``."""
    num = P.polymul(controller.num, plant.den)
    den = P.polyadd(P.polymul(controller.den, plant.den), P.polymul(controller.num, plant.num))
    return DtTransferFunction(num, den, plant.h)
