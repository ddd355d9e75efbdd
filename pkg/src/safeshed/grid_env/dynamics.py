"""Compiled kernels for the dynamic-load / linear-network surrogate.

Per load bus ``j``::

    T_p dx_j/dt = -x_j + P0_j p_j (V_j**alpha_s - V_j**alpha_t)
    P_j         = max(0, x_j + P0_j p_j V_j**alpha_t)

and per bus ``i`` the network is ``V_i = phi_i * (V_nl_i - sum_j S_ij P_j)``.
The network equation is implicit in the load-bus voltages and is solved by
Newton's method at every RK4 stage.
"""

import numpy as np
from numba import njit

NEWTON_TOL = 1e-14
NEWTON_MAXIT = 60

REMAINING_EPS = 1e-12

OK = 0
DIVERGED = 1


@njit(cache=True)
def _solve_small(A, b):
    # Gaussian elimination with partial pivoting; overwrites A and b.
    n = b.shape[0]
    for c in range(n):
        piv = c
        big = abs(A[c, c])
        for r in range(c + 1, n):
            if abs(A[r, c]) > big:
                big = abs(A[r, c])
                piv = r
        if big == 0.0:
            return False
        if piv != c:
            for k in range(n):
                tmp = A[c, k]
                A[c, k] = A[piv, k]
                A[piv, k] = tmp
            tmp = b[c]
            b[c] = b[piv]
            b[piv] = tmp
        for r in range(c + 1, n):
            f = A[r, c] / A[c, c]
            if f != 0.0:
                for k in range(c, n):
                    A[r, k] -= f * A[c, k]
                b[r] -= f * b[c]
    for c in range(n - 1, -1, -1):
        s = b[c]
        for k in range(c + 1, n):
            s -= A[c, k] * b[k]
        b[c] = s / A[c, c]
    return True


@njit(cache=True)
def power(v, a):
    # exact shortcuts for the common integer exponents
    if a == 0.0:
        return 1.0
    if a == 1.0:
        return v
    if a == 2.0:
        return v * v
    return v ** a


@njit(cache=True)
def demand(x, p, P0, v, alpha_t):
    d = x + P0 * p * power(v, alpha_t)
    return d if d > 0.0 else 0.0


@njit(cache=True)
def solve_network(VL, x, p, P0, SLL, vnlL, phiL, alpha_t, A, F, D, G):
    """Solve the load-bus voltages in place, warm-started from ``VL``.

    ``A`` (n x n), ``F``, ``D`` and ``G`` (n) are scratch buffers. Returns
    False when Newton fails or produces a non-positive or non-finite voltage.
    """
    n = VL.shape[0]
    for _ in range(NEWTON_MAXIT):
        for j in range(n):
            base = P0[j] * p[j]
            D[j] = x[j] + base * power(VL[j], alpha_t)
            if D[j] > 0.0:
                G[j] = base * alpha_t * power(VL[j], alpha_t - 1.0) if alpha_t != 0.0 else 0.0
            else:
                # loads never inject power
                D[j] = 0.0
                G[j] = 0.0
        resid = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += SLL[i, j] * D[j]
                A[i, j] = phiL[i] * SLL[i, j] * G[j]
            A[i, i] += 1.0
            F[i] = VL[i] - phiL[i] * (vnlL[i] - acc)
            if abs(F[i]) > resid:
                resid = abs(F[i])
        if resid < NEWTON_TOL:
            return True
        if not _solve_small(A, F):
            return False
        for i in range(n):
            VL[i] -= F[i]
            if not (VL[i] > 0.0) or not np.isfinite(VL[i]):
                return False
    return False


@njit(cache=True)
def load_derivative(x, VL, p, P0, alpha_s, alpha_t, T_p, out):
    for j in range(x.shape[0]):
        out[j] = (-x[j] + P0[j] * p[j] * (power(VL[j], alpha_s) - power(VL[j], alpha_t))) / T_p


@njit(cache=True)
def advance(x, p, VL, k0, n_sub, k_on, k_off, P0, SLL, vnlL, phi_fault_L,
            alpha_s, alpha_t, T_p, dt):
    """Integrate ``n_sub`` RK4 sub-steps starting at sub-step index ``k0``.

    ``x`` and ``VL`` are updated in place; on return ``VL`` is the network
    solution at index ``k0 + n_sub``. The fault depresses voltages on
    sub-steps ``k_on <= k < k_off``.
    """
    n = x.shape[0]
    ones = np.ones(n)
    A = np.empty((n, n))
    F = np.empty(n)
    D = np.empty(n)
    G = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xs = np.empty(n)
    Vs = VL.copy()
    for k in range(k0, k0 + n_sub):
        phiL = phi_fault_L if (k_on <= k < k_off) else ones
        # VL is already the solution at x for this sub-step's fault flag
        load_derivative(x, VL, p, P0, alpha_s, alpha_t, T_p, k1)
        for j in range(n):
            xs[j] = x[j] + 0.5 * dt * k1[j]
            Vs[j] = VL[j]
        if not solve_network(Vs, xs, p, P0, SLL, vnlL, phiL, alpha_t, A, F, D, G):
            return DIVERGED
        load_derivative(xs, Vs, p, P0, alpha_s, alpha_t, T_p, k2)
        for j in range(n):
            xs[j] = x[j] + 0.5 * dt * k2[j]
        if not solve_network(Vs, xs, p, P0, SLL, vnlL, phiL, alpha_t, A, F, D, G):
            return DIVERGED
        load_derivative(xs, Vs, p, P0, alpha_s, alpha_t, T_p, k3)
        for j in range(n):
            xs[j] = x[j] + dt * k3[j]
        if not solve_network(Vs, xs, p, P0, SLL, vnlL, phiL, alpha_t, A, F, D, G):
            return DIVERGED
        load_derivative(xs, Vs, p, P0, alpha_s, alpha_t, T_p, k4)
        for j in range(n):
            x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if not np.isfinite(x[j]):
                return DIVERGED
        nxt = k + 1
        phiL = phi_fault_L if (k_on <= nxt < k_off) else ones
        if not solve_network(VL, x, p, P0, SLL, vnlL, phiL, alpha_t, A, F, D, G):
            return DIVERGED
    return OK


@njit(cache=True)
def bus_voltages(x, p, VL, P0, S_rows, vnl_rows, phi_rows, alpha_t, out):
    """Voltages at a subset of buses given the solved load-bus voltages."""
    n = x.shape[0]
    for i in range(out.shape[0]):
        acc = 0.0
        for j in range(n):
            acc += S_rows[i, j] * demand(x[j], p[j], P0[j], VL[j], alpha_t)
        out[i] = phi_rows[i] * (vnl_rows[i] - acc)


@njit(cache=True)
def apply_shedding(action, p, x, P0, shed_out, invalid_threshold):
    """Apply one control interval's shed command in place.

    Returns the invalid-action count: buses commanded below
    ``invalid_threshold`` whose remaining load was already zero.
    """
    invalid = 0
    for j in range(p.shape[0]):
        request = -action[j]
        if request < 0.0:
            request = 0.0
        old = p[j]
        if old <= 0.0:
            shed_out[j] = 0.0
            if action[j] < invalid_threshold:
                invalid += 1
            continue
        new = old - request
        # repeated 0.2 blocks leave float dust; treat it as fully shed
        if new < REMAINING_EPS:
            new = 0.0
        shed_out[j] = P0[j] * (old - new)
        # the disconnected share of the aggregate load takes its recovery state with it
        x[j] = x[j] * (new / old)
        p[j] = new
    return invalid
