"""Independent straight-line transcriptions used as test oracles.

Written without reference to the package internals: thresholds are spelled
out as literal branches and everything is vectorised over samples. Buses
are summed left to right so that the float results can be compared at
1e-12 even where the barrier sum is large.
"""

import numpy as np


def lower_bound(tau):
    tau = np.asarray(tau, dtype=float)
    out = np.full(tau.shape, 0.95)
    out = np.where(tau < 1.5, 0.9, out)
    out = np.where(tau < 0.5, 0.8, out)
    out = np.where(tau < 0.33, 0.7, out)
    return out


def band(tau):
    tau = np.asarray(tau, dtype=float)
    centre = np.select([tau < 0.33, tau < 0.5, tau < 1.5], [1.1, 1.15, 1.2], 1.225)
    half = np.select([tau < 0.33, tau < 0.5, tau < 1.5], [0.4, 0.35, 0.3], 0.275)
    return centre, half


def reward(V, shed_total, u, t, T_pf, c1, c2, c3):
    """Per-step reward; ``T_pf`` NaN means the fault has not cleared."""
    V = np.atleast_2d(V)
    cleared = ~np.isnan(T_pf)
    tau = np.where(cleared, t - np.nan_to_num(T_pf), -1.0)
    thr = lower_bound(np.maximum(tau, 0.0))
    dv = np.zeros(V.shape[0])
    for i in range(V.shape[1]):
        dv = dv + np.minimum(V[:, i] - thr, 0.0)
    dv = np.where(cleared & (tau > 0), dv, 0.0)
    plain = c1 * dv - c2 * shed_total - c3 * u
    late = cleared & (tau > 4.0) & (V.min(axis=1) < 0.95)
    return np.where(late, -1000.0, plain), late


def safety(V, tau):
    V = np.atleast_2d(V)
    centre, half = band(tau)
    worst = np.zeros(V.shape[0])
    for i in range(V.shape[1]):
        worst = np.maximum(worst, (V[:, i] - centre) ** 2)
    return half ** 2 - worst


def barrier(V, tau, bmax):
    V = np.atleast_2d(V)
    thr = lower_bound(tau)
    total = np.zeros(V.shape[0])
    hit = np.zeros(V.shape[0], dtype=bool)
    for i in range(V.shape[1]):
        gap = V[:, i] - thr
        hit |= gap <= 0
        total = total + 1.0 / np.where(gap > 0, gap * gap, 1.0)
    return np.where(hit, bmax, np.minimum(total, bmax))


def lagrangian(r, f, lam):
    return r + lam * f


def shaped(r, B, c4):
    return r - c4 * B
