"""Compiled CSTR kernels in nondimensional variables.

Parameter vector layout (dimensional, Table-style units):
``[e_over_r, k0, dh_rhocp, ua_rhocpv, q_over_v, ca0, t0, conc_scale, temp_offset, temp_scale]``.
State is ``(ca_hat, tr_hat)``, the input is the nondimensional coolant temperature.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def rhs_hat(p, c, t, u):
    e_r, k0, dh, ua, qv, ca0, t0, cs, toff, ts = (
        p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9])
    ca = cs * c
    tr = toff + ts * t
    tc = toff + ts * u
    k = k0 * np.exp(-e_r / tr)
    dc = (qv * (ca0 - ca) - k * ca) / cs
    dt = (qv * (t0 - tr) - dh * k * ca + ua * (tc - tr)) / ts
    return dc, dt


@njit(cache=True)
def jac_hat(p, c, t, u):
    """Returns (J00, J01, J10, J11, Ju0, Ju1) of the nondimensional RHS."""
    e_r, k0, dh, ua, qv, ca0, t0, cs, toff, ts = (
        p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9])
    ca = cs * c
    tr = toff + ts * t
    k = k0 * np.exp(-e_r / tr)
    dk_dt = k * e_r / (tr * tr) * ts
    j00 = -qv - k
    j01 = -dk_dt * ca / cs
    j10 = -dh * k * cs / ts
    j11 = (-qv * ts - dh * dk_dt * ca - ua * ts) / ts
    return j00, j01, j10, j11, 0.0, ua


@njit(cache=True)
def rk4_step(p, c, t, u, dt, nsub):
    h = dt / nsub
    for _ in range(nsub):
        a0, b0 = rhs_hat(p, c, t, u)
        a1, b1 = rhs_hat(p, c + 0.5 * h * a0, t + 0.5 * h * b0, u)
        a2, b2 = rhs_hat(p, c + 0.5 * h * a1, t + 0.5 * h * b1, u)
        a3, b3 = rhs_hat(p, c + h * a2, t + h * b2, u)
        c = c + h / 6.0 * (a0 + 2.0 * a1 + 2.0 * a2 + a3)
        t = t + h / 6.0 * (b0 + 2.0 * b1 + 2.0 * b2 + b3)
    return c, t


@njit(cache=True)
def _stage(p, c, t, u, S):
    # derivative of the stage slope w.r.t. (c0, t0, u) given dx/d(c0,t0,u) = S
    a, b = rhs_hat(p, c, t, u)
    j00, j01, j10, j11, ju0, ju1 = jac_hat(p, c, t, u)
    K = np.empty((2, 3))
    for col in range(3):
        K[0, col] = j00 * S[0, col] + j01 * S[1, col]
        K[1, col] = j10 * S[0, col] + j11 * S[1, col]
    K[0, 2] += ju0
    K[1, 2] += ju1
    return a, b, K


@njit(cache=True)
def rk4_step_sens(p, c, t, u, dt, nsub):
    """One sample with the exact Jacobian of the discrete RK4 map.

    Returns ``(c, t, S)`` where ``S[:, :2]`` is d(next state)/d(state) and
    ``S[:, 2]`` is d(next state)/du.
    """
    h = dt / nsub
    S = np.zeros((2, 3))
    S[0, 0] = 1.0
    S[1, 1] = 1.0
    for _ in range(nsub):
        a0, b0, K0 = _stage(p, c, t, u, S)
        a1, b1, K1 = _stage(p, c + 0.5 * h * a0, t + 0.5 * h * b0, u, S + 0.5 * h * K0)
        a2, b2, K2 = _stage(p, c + 0.5 * h * a1, t + 0.5 * h * b1, u, S + 0.5 * h * K1)
        a3, b3, K3 = _stage(p, c + h * a2, t + h * b2, u, S + h * K2)
        c = c + h / 6.0 * (a0 + 2.0 * a1 + 2.0 * a2 + a3)
        t = t + h / 6.0 * (b0 + 2.0 * b1 + 2.0 * b2 + b3)
        S = S + h / 6.0 * (K0 + 2.0 * K1 + 2.0 * K2 + K3)
    return c, t, S


@njit(cache=True)
def rollout(p, c, t, u, dt, nsub):
    n = u.shape[0]
    out = np.empty((n + 1, 2))
    out[0, 0] = c
    out[0, 1] = t
    for i in range(n):
        c, t = rk4_step(p, c, t, u[i], dt, nsub)
        out[i + 1, 0] = c
        out[i + 1, 1] = t
    return out


@njit(cache=True)
def tracking_cost(p, c, t, u, r0, dt, nsub):
    """Sum over i = 0..N-1 of (cb_i - r0)^2 along the predicted trajectory."""
    ca0_hat = p[5] / p[7]
    n = u.shape[0]
    cost = (ca0_hat - c - r0) ** 2
    for i in range(n - 1):
        c, t = rk4_step(p, c, t, u[i], dt, nsub)
        cost += (ca0_hat - c - r0) ** 2
    return cost


@njit(cache=True)
def tracking_cost_grad(p, c, t, u, r0, dt, nsub):
    ca0_hat = p[5] / p[7]
    n = u.shape[0]
    cs = np.empty(n)
    jx = np.empty((n, 2, 2))
    ju = np.empty((n, 2))
    cs[0] = c
    for i in range(n - 1):
        c, t, S = rk4_step_sens(p, c, t, u[i], dt, nsub)
        cs[i + 1] = c
        jx[i, 0, 0] = S[0, 0]
        jx[i, 0, 1] = S[0, 1]
        jx[i, 1, 0] = S[1, 0]
        jx[i, 1, 1] = S[1, 1]
        ju[i, 0] = S[0, 2]
        ju[i, 1] = S[1, 2]
    cost = 0.0
    for i in range(n):
        cost += (ca0_hat - cs[i] - r0) ** 2
    grad = np.zeros(n)
    # adjoint of x_{n-1}; x_n never enters the cost so u_{n-1} has zero gradient
    l0 = -2.0 * (ca0_hat - cs[n - 1] - r0)
    l1 = 0.0
    for i in range(n - 1, 0, -1):
        grad[i - 1] = l0 * ju[i - 1, 0] + l1 * ju[i - 1, 1]
        n0 = jx[i - 1, 0, 0] * l0 + jx[i - 1, 1, 0] * l1
        n1 = jx[i - 1, 0, 1] * l0 + jx[i - 1, 1, 1] * l1
        l0 = n0 - 2.0 * (ca0_hat - cs[i - 1] - r0)
        l1 = n1
    return cost, grad
