"""Split an unfactored transfer function into additive submodels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import linear_sum_assignment

from .lti import (
    AdditiveModel,
    CtSubmodel,
    CtTransferFunction,
    ModelStructure,
    pack_parameters,
    poly_roots,
)

__all__ = ["FactorResult", "StructureMismatchError", "factor_unfactored"]


class StructureMismatchError(ValueError):
    """The rational function cannot be split into the requested submodels."""


@dataclass
class FactorResult:
    """Additive decomposition of an unfactored model.

    ``parts`` are the exact partial-fraction groups, whose sum reproduces the
    input. ``model``/``beta`` keep only the numerator coefficients allowed by
    the target structure; the discarded ones are listed in ``dropped``.
    """

    parts: list
    model: AdditiveModel
    beta: np.ndarray
    dropped: list

    def freqresp(self, w):
        return sum(p.freqresp(w) for p in self.parts)


def _clusters(roots: np.ndarray, tol: float) -> list[np.ndarray]:
    """Group roots into real singletons and complex-conjugate pairs."""
    roots = list(roots)
    out = []
    while roots:
        r = roots.pop(0)
        if abs(r.imag) <= tol * max(1.0, abs(r)):
            out.append(np.array([r.real + 0j]))
            continue
        j = int(np.argmin([abs(x - np.conj(r)) for x in roots])) if roots else -1
        if j < 0:
            raise StructureMismatchError("complex root without conjugate partner")
        out.append(np.array([r, roots.pop(j)]))
    return out


def _assign(clusters, structure: ModelStructure, reference: Optional[AdditiveModel]):
    sizes = [n for n, _ in structure.orders]
    if sum(c.size for c in clusters) != sum(sizes):
        raise StructureMismatchError(
            f"denominator has {sum(c.size for c in clusters)} non-origin roots, structure needs {sum(sizes)}"
        )
    groups = [[] for _ in sizes]
    if reference is not None:
        # one slot per reference pole, matched on cluster centroids
        slots, targets = [], []
        for i, s in enumerate(reference.submodels):
            for pole in s.poles():
                slots.append(i)
                targets.append(pole)
        roots = np.concatenate(clusters)
        owner = np.concatenate([[k] * c.size for k, c in enumerate(clusters)])
        cost = np.abs(roots[:, None] - np.asarray(targets)[None, :])
        ri, ci = linear_sum_assignment(cost)
        by_cluster = {}
        for r_idx, c_idx in zip(ri, ci):
            by_cluster.setdefault(owner[r_idx], set()).add(slots[c_idx])
        for k, c in enumerate(clusters):
            dest = by_cluster.get(k, set())
            if len(dest) != 1:
                raise StructureMismatchError("a conjugate pair would be split across submodels")
            groups[dest.pop()].append(c)
    else:
        order = sorted(range(len(clusters)), key=lambda k: (np.abs(clusters[k]).min(), clusters[k].size))
        it = iter(order)
        for i, n in enumerate(sizes):
            filled = 0
            while filled < n:
                k = next(it)
                groups[i].append(clusters[k])
                filled += clusters[k].size
            if filled != n:
                raise StructureMismatchError(f"submodel {i + 1} cannot take exactly {n} poles")
    out = []
    for i, g in enumerate(groups):
        r = np.concatenate(g) if g else np.zeros(0, dtype=complex)
        if r.size != sizes[i]:
            raise StructureMismatchError(f"submodel {i + 1} received {r.size} poles, expected {sizes[i]}")
        out.append(r)
    return out


def factor_unfactored(
    tf: CtTransferFunction,
    structure: ModelStructure,
    reference: Optional[AdditiveModel] = None,
    root_tol: float = 1e-8,
) -> FactorResult:
    """Partial-fraction split of ``tf`` into the submodels of ``structure``.

    Poles are grouped by conjugate pairs; with ``reference`` each group goes
    to the submodel whose reference poles are closest, otherwise groups are
    handed out in order of increasing pole magnitude. Integrator poles must
    appear as exactly zero low-order denominator coefficients.
    """
    num = np.asarray(tf.num, dtype=float)
    den = np.asarray(tf.den, dtype=float)
    ell = structure.integrator_order
    lead_zeros = int(np.flatnonzero(den)[0])
    if lead_zeros != ell:
        raise StructureMismatchError(f"{lead_zeros} poles at the origin, structure declares {ell}")
    n_tot = den.size - 1
    c = 0.0
    if num.size == den.size:
        c = num[-1] / den[-1]
        num = P.polysub(num, c * den)[:n_tot] if n_tot else np.zeros(1)
    elif num.size > den.size:
        raise StructureMismatchError("improper transfer function")
    core = den[ell:]
    roots = poly_roots(core) if core.size > 1 else np.zeros(0, dtype=complex)
    groups = _assign(_clusters(roots, root_tol), structure, reference)

    scale = max(1.0, float(np.abs(roots).max()) if roots.size else 1.0)
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            if groups[i].size and groups[j].size:
                if np.abs(groups[i][:, None] - groups[j][None, :]).min() < 1e-6 * scale:
                    raise StructureMismatchError("repeated pole shared by two submodels")

    # monic group denominators D_i (with p^ell on the first)
    monic = [np.real(P.polyfromroots(g)) if g.size else np.ones(1) for g in groups]
    D = [np.concatenate((np.zeros(ell), monic[0]))] + monic[1:]
    lead = den[-1]
    rhs = np.zeros(n_tot)
    rhs[: min(num.size, n_tot)] = (num / lead)[:n_tot]
    cols = []
    for i, Di in enumerate(D):
        others = np.ones(1)
        for j, Dj in enumerate(D):
            if j != i:
                others = P.polymul(others, Dj)
        for k in range(Di.size - 1):
            col = np.zeros(n_tot)
            term = P.polymul(_shift_unit(k), others)
            col[: term.size] = term[:n_tot]
            cols.append(col)
    if n_tot:
        coeffs = np.linalg.solve(np.column_stack(cols), rhs) if cols else np.zeros(0)
    else:
        coeffs = np.zeros(0)

    biproper = [i for i, (n, m) in enumerate(structure.orders) if n + structure.integrator(i) == m]
    if c != 0 and not biproper:
        if abs(c) > 1e-9 * max(1.0, np.abs(num).max()):
            raise StructureMismatchError("direct feedthrough term but no biproper submodel declared")
        c = 0.0

    parts, subs, dropped = [], [], []
    pos = 0
    for i, (Di, (n, m)) in enumerate(zip(D, structure.orders)):
        k = Di.size - 1
        Ni = coeffs[pos: pos + k] if k else np.zeros(0)
        pos += k
        Ni = np.concatenate((Ni, [0.0])) if Ni.size < Di.size else Ni
        if biproper and i == biproper[0]:
            Ni = P.polyadd(Ni, c * Di)
        a_core = monic[i]
        s0 = a_core[0]
        parts.append(CtTransferFunction(Ni, Di))
        b_full = np.asarray(Ni, dtype=float) / s0
        b = np.zeros(m + 1)
        b[: min(m + 1, b_full.size)] = b_full[: m + 1]
        dropped.append(b_full[m + 1:].tolist())
        subs.append(CtSubmodel(a_core / s0, b))
    model = AdditiveModel(tuple(subs), ell, structure.input_delay, check=False)
    return FactorResult(parts, model, pack_parameters(model), dropped)


def _shift_unit(k: int) -> np.ndarray:
    e = np.zeros(k + 1)
    e[k] = 1.0
    return e
