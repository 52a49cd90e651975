"""Closed-form and semi-analytic checks on the controlled SEIR system."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DomainError, InvariantError, ParameterError
from .seir import EpidemicState, ModelParams, Trajectory, check_initial

_INV_E = math.exp(-1.0)


def lambert_w0(z: float) -> float:
    """Principal branch of the Lambert W function for real ``z >= -1/e``.

    Halley iteration started from the branch-point series near ``-1/e``, the
    asymptotic ``log z - log log z`` for large ``z`` and ``z/(1+z)`` otherwise.
    """
    z = float(z)
    if math.isnan(z):
        raise DomainError("lambert_w0 of NaN")
    if z < -_INV_E - 1e-15:
        raise DomainError(f"lambert_w0 undefined for z={z!r} < -1/e")
    if z <= -_INV_E:
        return -1.0
    if z == 0.0:
        return 0.0
    if math.isinf(z):
        return math.inf

    if z < -0.25 * _INV_E:
        p = math.sqrt(max(0.0, 2.0 * (math.e * z + 1.0)))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    elif z > math.e:
        lz = math.log(z)
        w = lz - math.log(lz)
    else:
        w = z / (1.0 + z)

    for _ in range(50):
        ew = math.exp(w)
        f = w * ew - z
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        if denom == 0.0:
            break
        dw = f / denom
        w -= dw
        if abs(dw) <= 1e-15 * (1.0 + abs(w)):
            break
    return max(w, -1.0)


@dataclass(frozen=True)
class FinalSizeResult:
    s_inf: float
    final_size: float
    implicit_residual: float


def final_size_max_suppression(x0: EpidemicState, params: ModelParams) -> FinalSizeResult:
    """Limiting susceptible fraction under ``h = h_max``, ``u = 0``.

    Solves ``ln(s/s0) = -(b/gamma)(X0 - s)`` with ``b = beta - h_max`` and
    ``X0 = s0 + e0 + i0`` through the principal Lambert branch.
    """
    x = check_initial(x0)
    s0, e0, i0 = x[0], x[1], x[2]
    if not s0 > 0:
        raise ParameterError("final size needs s0 > 0")
    ratio = (params.beta - params.h_max) / params.gamma
    big_x = s0 + e0 + i0
    z = -ratio * s0 * math.exp(-ratio * big_x)
    # z >= -1/e holds for every simplex point since a*exp(-a) <= 1/e
    assert z >= -_INV_E - 1e-15
    s_inf = -lambert_w0(z) / ratio
    resid = abs(math.log(s_inf / s0) + ratio * (big_x - s_inf))
    if resid > 1e-10:
        raise InvariantError(f"final-size implicit residual {resid:.3e} > 1e-10")
    return FinalSizeResult(s_inf=s_inf, final_size=1.0 - s_inf, implicit_residual=resid)


def final_size_upper_bound(traj: Trajectory, params: ModelParams) -> float:
    """Bound ``s0 exp(-int[(beta - h_max) i + u])`` on the limiting susceptible fraction."""
    if traj.i[-1] >= 1e-6:
        warnings.warn(
            f"i(T)={traj.i[-1]:.3e} >= 1e-6: horizon too short, bound is truncated",
            RuntimeWarning, stacklevel=2)
    b = params.beta - params.h_max
    u = traj.step_controls[:, 0]
    rate_l = b * traj.i[:-1] + u
    rate_r = b * traj.i[1:] + u
    bound = traj.s[0] * math.exp(-float(np.sum(0.5 * traj.dt * (rate_l + rate_r))))
    if traj.s[-1] > bound + 1e-6:
        raise InvariantError(f"s(T)={traj.s[-1]!r} exceeds final-size bound {bound!r}")
    return bound


def r_eff(state: EpidemicState, h: float, params: ModelParams) -> float:
    if not 0 <= h < params.beta:
        raise ParameterError(f"need 0 <= h < beta, got h={h!r}")
    return (params.beta - h) * state.s / params.gamma


def boundary_maintenance_control(s: float, params: ModelParams,
                                 tol: float = 1e-12) -> tuple[float, bool]:
    """Suppression ``beta - gamma/s`` that pins ``i`` at capacity, clamped to the box.

    The flag is False when the unclamped value leaves ``[0, h_max]``, i.e. when
    ``s`` is outside ``[gamma/beta, gamma/(beta - h_max)]``.
    """
    if not s > 0:
        raise ParameterError(f"s must be > 0, got {s!r}")
    h = params.beta - params.gamma / s
    admissible = -tol <= h <= params.h_max + tol
    return min(max(h, 0.0), params.h_max), admissible


def time_free_integral(traj: Trajectory, params: ModelParams) -> np.ndarray:
    """Cumulative ``int_{s(t)}^{s0} (u X + gamma i) / (X [(beta-h) i + u]) dX``.

    Integrated on the s-grid induced by the time samples, trapezoid rule per
    step with the step's control at both ends.
    """
    s, i = traj.s, traj.i
    u = traj.step_controls[:, 0]
    h = traj.step_controls[:, 1]
    b = params.beta - h
    den_l = b * i[:-1] + u
    den_r = b * i[1:] + u
    if np.any(den_l < 1e-14) or np.any(den_r < 1e-14):
        raise DegenerateError("(beta-h) i + u vanishes: s is stationary, change of variables invalid")
    g_l = (u * s[:-1] + params.gamma * i[:-1]) / (s[:-1] * den_l)
    g_r = (u * s[1:] + params.gamma * i[1:]) / (s[1:] * den_r)
    out = np.zeros(len(s))
    out[1:] = np.cumsum(0.5 * (g_l + g_r) * (s[:-1] - s[1:]))
    return out


def time_free_residual(traj: Trajectory, params: ModelParams) -> float:
    """Max gap between the s-parametrised outflow integral and the drop in s + e + i."""
    x = traj.states[:, :3].sum(axis=1)
    delta_x = x[0] - x
    return float(np.max(np.abs(time_free_integral(traj, params) - delta_x)))
