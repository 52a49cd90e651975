"""Compiled inner loops for the forward and adjoint RK4 passes.

Everything here works on plain floats and contiguous float64 arrays so numba
can compile it in nopython mode.  Public wrappers live in ``seir`` and ``pmp``.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _seir_f(s, e, i, beff, u, sigma, gamma):
    inf = beff * s * i
    vac = u * s
    rec = gamma * i
    inc = sigma * e
    return -inf - vac, inf - inc, inc - rec, rec + vac


@njit(cache=True)
def rk4_forward(x0, u_steps, h_steps, beta, sigma, gamma, dt, clamp_tol):
    """Integrate the controlled SEIR system with controls held per step.

    Returns ``(states, bad_step)``; ``bad_step`` is -1 on success, otherwise the
    index of the first step producing a component below ``-clamp_tol``.
    """
    n = u_steps.shape[0]
    out = np.empty((n + 1, 4))
    s, e, i, r = x0[0], x0[1], x0[2], x0[3]
    out[0, 0] = s
    out[0, 1] = e
    out[0, 2] = i
    out[0, 3] = r
    half = 0.5 * dt
    for k in range(n):
        u = u_steps[k]
        b = beta - h_steps[k]
        a1, b1, c1, d1 = _seir_f(s, e, i, b, u, sigma, gamma)
        a2, b2, c2, d2 = _seir_f(s + half * a1, e + half * b1, i + half * c1, b, u, sigma, gamma)
        a3, b3, c3, d3 = _seir_f(s + half * a2, e + half * b2, i + half * c2, b, u, sigma, gamma)
        a4, b4, c4, d4 = _seir_f(s + dt * a3, e + dt * b3, i + dt * c3, b, u, sigma, gamma)
        w = dt / 6.0
        s = s + w * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        e = e + w * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        i = i + w * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        r = r + w * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        # round-off below zero is clamped; anything larger is reported
        if s < 0.0:
            if s < -clamp_tol:
                return out[: k + 1], k
            s = 0.0
        if e < 0.0:
            if e < -clamp_tol:
                return out[: k + 1], k
            e = 0.0
        if i < 0.0:
            if i < -clamp_tol:
                return out[: k + 1], k
            i = 0.0
        if r < 0.0:
            if r < -clamp_tol:
                return out[: k + 1], k
            r = 0.0
        out[k + 1, 0] = s
        out[k + 1, 1] = e
        out[k + 1, 2] = i
        out[k + 1, 3] = r
    return out, -1


@njit(cache=True)
def _adj_f(t, ls, le, li, s, i, u, h, beta, sigma, gamma, c_h, c_nh, c_v, delta, kappa, i_max):
    disc = math.exp(-delta * t)
    b = beta - h
    excess = i - i_max
    if excess < 0.0:
        excess = 0.0
    dls = -c_v * u * disc + ls * (b * i + u) - le * b * i
    dle = sigma * (le - li)
    dli = -(c_h * h + c_nh + 2.0 * kappa * excess) * disc + (ls - le) * b * s + gamma * li
    return dls, dle, dli


@njit(cache=True)
def rk4_adjoint(states, u_steps, h_steps, t0, dt, beta, sigma, gamma,
                c_h, c_nh, c_v, delta, kappa, i_max):
    """Backward RK4 for the costates from lambda(T) = 0.

    Forward states at step midpoints come from the cubic Hermite interpolant
    built on the stored samples and the step's own vector field.
    """
    n = u_steps.shape[0]
    lam = np.zeros((n + 1, 3))
    ls = 0.0
    le = 0.0
    li = 0.0
    for k in range(n - 1, -1, -1):
        u = u_steps[k]
        h = h_steps[k]
        b = beta - h
        s0, e0, i0 = states[k, 0], states[k, 1], states[k, 2]
        s1, e1, i1 = states[k + 1, 0], states[k + 1, 1], states[k + 1, 2]
        fs0, fe0, fi0, _ = _seir_f(s0, e0, i0, b, u, sigma, gamma)
        fs1, fe1, fi1, _ = _seir_f(s1, e1, i1, b, u, sigma, gamma)
        sm = 0.5 * (s0 + s1) + dt / 8.0 * (fs0 - fs1)
        im = 0.5 * (i0 + i1) + dt / 8.0 * (fi0 - fi1)
        t1 = t0 + (k + 1) * dt
        tm = t1 - 0.5 * dt
        tk = t0 + k * dt
        a1, b1, c1 = _adj_f(t1, ls, le, li, s1, i1, u, h, beta, sigma, gamma,
                            c_h, c_nh, c_v, delta, kappa, i_max)
        a2, b2, c2 = _adj_f(tm, ls - 0.5 * dt * a1, le - 0.5 * dt * b1, li - 0.5 * dt * c1,
                            sm, im, u, h, beta, sigma, gamma, c_h, c_nh, c_v, delta, kappa, i_max)
        a3, b3, c3 = _adj_f(tm, ls - 0.5 * dt * a2, le - 0.5 * dt * b2, li - 0.5 * dt * c2,
                            sm, im, u, h, beta, sigma, gamma, c_h, c_nh, c_v, delta, kappa, i_max)
        a4, b4, c4 = _adj_f(tk, ls - dt * a3, le - dt * b3, li - dt * c3,
                            s0, i0, u, h, beta, sigma, gamma, c_h, c_nh, c_v, delta, kappa, i_max)
        w = dt / 6.0
        ls = ls - w * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        le = le - w * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        li = li - w * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        lam[k, 0] = ls
        lam[k, 1] = le
        lam[k, 2] = li
    return lam
