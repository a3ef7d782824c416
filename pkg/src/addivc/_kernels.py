"""Compiled recursions for discrete state-space simulation."""

import numpy as np
from numba import njit


@njit(cache=True)
def state_sequence(Ad, Bd, u):
    """States ``x[k]`` of ``x[k+1] = Ad x[k] + Bd u[k]`` from ``x[0] = 0``."""
    n = Ad.shape[0]
    N = u.shape[0]
    X = np.empty((N, n))
    x = np.zeros(n)
    xn = np.empty(n)
    for k in range(N):
        uk = u[k]
        for i in range(n):
            X[k, i] = x[i]
        for i in range(n):
            acc = Bd[i] * uk
            for j in range(n):
                acc += Ad[i, j] * x[j]
            xn[i] = acc
        for i in range(n):
            x[i] = xn[i]
    return X


@njit(cache=True)
def feedback_loop(Ap, Bp, Cp, Dp, Ac, Bc, Cc, Dc, r, v):
    """Simulate ``u = C(q)(r - y)``, ``y = G(q) u + v`` from rest.

    Direct feedthrough in both blocks is resolved per sample by solving the
    scalar loop equation ``(1 + Dc Dp) u = Cc xc + Dc (r - Cp xp - v)``.
    """
    n_p = Ap.shape[0]
    n_c = Ac.shape[0]
    N = r.shape[0]
    u = np.empty(N)
    y = np.empty(N)
    xp = np.zeros(n_p)
    xc = np.zeros(n_c)
    xpn = np.empty(n_p)
    xcn = np.empty(n_c)
    denom = 1.0 + Dc * Dp
    for k in range(N):
        yp = 0.0
        for i in range(n_p):
            yp += Cp[i] * xp[i]
        uc = 0.0
        for i in range(n_c):
            uc += Cc[i] * xc[i]
        uk = (uc + Dc * (r[k] - yp - v[k])) / denom
        yk = yp + Dp * uk + v[k]
        e = r[k] - yk
        u[k] = uk
        y[k] = yk
        for i in range(n_p):
            acc = Bp[i] * uk
            for j in range(n_p):
                acc += Ap[i, j] * xp[j]
            xpn[i] = acc
        for i in range(n_c):
            acc = Bc[i] * e
            for j in range(n_c):
                acc += Ac[i, j] * xc[j]
            xcn[i] = acc
        for i in range(n_p):
            xp[i] = xpn[i]
        for i in range(n_c):
            xc[i] = xcn[i]
    return u, y
