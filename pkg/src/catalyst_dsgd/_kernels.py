"""Compiled inner loop for DSGD rounds on quadratic objectives."""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def quadratic_rounds(X, H, g, noise, has_noise, mats, widx, eta, ref_x, ref_H,
                     stop_dist, out_gap, out_dist, out_cons):
    """Run ``len(widx)`` DSGD rounds in place on ``X``.

    Round ``t`` computes ``X <- W (X - eta * (H x_i - g_i + noise_t,i))`` with
    ``W = mats[widx[t]]`` and stores ``f(xbar) - f*`` (as the quadratic form of
    ``ref_H`` around ``ref_x``), ``||xbar - ref_x||^2`` and the consensus error
    of the new iterate. Returns the number of rounds executed; stops early once
    the distance is ``<= stop_dist`` (pass a negative value to disable).
    """
    n, d = X.shape
    half = np.empty((n, d))
    xbar = np.empty(d)
    e = np.empty(d)
    m = widx.shape[0]
    for t in range(m):
        for i in range(n):
            for a in range(d):
                s = -g[i, a]
                for b in range(d):
                    s += H[i, a, b] * X[i, b]
                if has_noise:
                    s += noise[t, i, a]
                half[i, a] = X[i, a] - eta * s
        W = mats[widx[t]]
        for i in range(n):
            for a in range(d):
                X[i, a] = 0.0
            for j in range(n):
                w = W[i, j]
                if w != 0.0:
                    for a in range(d):
                        X[i, a] += w * half[j, a]
        for a in range(d):
            acc = 0.0
            for i in range(n):
                acc += X[i, a]
            xbar[a] = acc / n
            e[a] = xbar[a] - ref_x[a]
        dist = 0.0
        gap = 0.0
        for a in range(d):
            dist += e[a] * e[a]
            row = 0.0
            for b in range(d):
                row += ref_H[a, b] * e[b]
            gap += e[a] * row
        cons = 0.0
        for i in range(n):
            for a in range(d):
                diff = X[i, a] - xbar[a]
                cons += diff * diff
        out_gap[t] = 0.5 * gap
        out_dist[t] = dist
        out_cons[t] = cons
        if dist <= stop_dist:
            return t + 1
    return m


@numba.njit(cache=True, fastmath=True)
def diagonal_rounds(X, lam, g, noise, has_noise, mats, widx, eta, ref_x, ref_lam,
                    stop_dist, out_gap, out_dist, out_cons):
    """Same as :func:`quadratic_rounds` with every Hessian diagonal (``lam[i]``)."""
    n, d = X.shape
    half = np.empty((n, d))
    xbar = np.empty(d)
    m = widx.shape[0]
    for t in range(m):
        for i in range(n):
            for a in range(d):
                s = lam[i, a] * X[i, a] - g[i, a]
                if has_noise:
                    s += noise[t, i, a]
                half[i, a] = X[i, a] - eta * s
        W = mats[widx[t]]
        for i in range(n):
            for a in range(d):
                X[i, a] = 0.0
            for j in range(n):
                w = W[i, j]
                if w != 0.0:
                    for a in range(d):
                        X[i, a] += w * half[j, a]
        for a in range(d):
            acc = 0.0
            for i in range(n):
                acc += X[i, a]
            xbar[a] = acc / n
        dist = 0.0
        gap = 0.0
        for a in range(d):
            e = xbar[a] - ref_x[a]
            dist += e * e
            gap += ref_lam[a] * e * e
        cons = 0.0
        for i in range(n):
            for a in range(d):
                diff = X[i, a] - xbar[a]
                cons += diff * diff
        out_gap[t] = 0.5 * gap
        out_dist[t] = dist
        out_cons[t] = cons
        if dist <= stop_dist:
            return t + 1
    return m
