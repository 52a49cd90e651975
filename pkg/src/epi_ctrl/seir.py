"""Controlled SEIR dynamics: domain types and the fixed-step RK4 integrator.

State is the simplex point ``(s, e, i, r)``.  Vaccination ``u`` moves mass from
``s`` to ``r``; suppression ``h`` lowers the transmission rate to ``beta - h``.
Controls are piecewise constant on a uniform grid and may only switch on after
their activation delays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import InvariantError, ParameterError

CLAMP_TOL = 1e-12
CONSERVATION_TOL = 1e-9
INITIAL_SUM_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelParams:
    """Epidemiological rates, control bounds, activation delays and capacity.

    Rates are per day; ``i_max`` is the capacity fraction of the population.
    """

    beta: float
    sigma: float
    gamma: float
    u_max: float
    h_max: float
    t_delay_u: float = 0.0
    t_delay_h: float = 0.0
    i_max: float = 0.1

    def __post_init__(self):
        for name in ("beta", "sigma", "gamma"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if not 0 <= self.h_max < self.beta:
            raise ParameterError(
                f"need 0 <= h_max < beta, got h_max={self.h_max!r}, beta={self.beta!r}")
        if not self.u_max >= 0:
            raise ParameterError(f"u_max must be >= 0, got {self.u_max!r}")
        if not (self.t_delay_u >= 0 and self.t_delay_h >= 0):
            raise ParameterError("activation delays must be >= 0")
        if not 0 < self.i_max <= 1:
            raise ParameterError(f"i_max must lie in (0, 1], got {self.i_max!r}")

    def replace(self, **changes) -> "ModelParams":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class EpidemicState:
    s: float
    e: float
    i: float
    r: float
    tol: float = field(default=CONSERVATION_TOL, compare=False, repr=False)

    def __post_init__(self):
        for name in ("s", "e", "i", "r"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvariantError(f"state component {name}={v!r} outside [0, 1]")
        total = self.s + self.e + self.i + self.r
        if abs(total - 1.0) > self.tol:
            raise InvariantError(f"state sums to {total!r}, not 1 (tol {self.tol:g})")

    @classmethod
    def from_array(cls, x, tol: float = CONSERVATION_TOL) -> "EpidemicState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]), tol=tol)

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.e, self.i, self.r])


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant ``(u, h)`` on cells ``[t0 + k*dt, t0 + (k+1)*dt)``."""

    t0: float
    dt: float
    u_values: np.ndarray
    h_values: np.ndarray

    def __post_init__(self):
        u = _frozen(self.u_values)
        h = _frozen(self.h_values)
        if u.ndim != 1 or u.shape != h.shape:
            raise ParameterError("u_values and h_values must be 1-D sequences of equal length")
        if len(u) == 0:
            raise ParameterError("schedule has no cells")
        if not self.dt > 0:
            raise ParameterError(f"schedule dt must be > 0, got {self.dt!r}")
        object.__setattr__(self, "u_values", u)
        object.__setattr__(self, "h_values", h)

    @property
    def n_cells(self) -> int:
        return len(self.u_values)

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_cells * self.dt

    @property
    def cell_starts(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_cells)

    def delay_masks(self, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        """Boolean masks of cells frozen at zero by the activation delays."""
        starts = self.cell_starts
        eps = 1e-9 * self.dt
        return starts < params.t_delay_u - eps, starts < params.t_delay_h - eps

    def validate(self, params: ModelParams, tol: float = 1e-12) -> None:
        u, h = self.u_values, self.h_values
        if np.any(u < -tol) or np.any(u > params.u_max + tol):
            raise ParameterError("u values outside [0, u_max]")
        if np.any(h < -tol) or np.any(h > params.h_max + tol):
            raise ParameterError("h values outside [0, h_max]")
        frozen_u, frozen_h = self.delay_masks(params)
        if np.any(u[frozen_u] != 0):
            raise ParameterError("u must be 0 on cells starting before t_delay_u")
        if np.any(h[frozen_h] != 0):
            raise ParameterError("h must be 0 on cells starting before t_delay_h")

    @classmethod
    def constant(cls, params: ModelParams, horizon: float, dt: float,
                 u: float = 0.0, h: float = 0.0, t0: float = 0.0) -> "ControlSchedule":
        """Constant controls, zeroed on the delay windows."""
        n = _n_steps(horizon, dt, "horizon", "schedule dt")
        proto = cls(t0, dt, np.zeros(n), np.zeros(n))
        frozen_u, frozen_h = proto.delay_masks(params)
        return cls(t0, dt, np.where(frozen_u, 0.0, u), np.where(frozen_h, 0.0, h))

    def with_values(self, u_values, h_values) -> "ControlSchedule":
        return ControlSchedule(self.t0, self.dt, u_values, h_values)


@dataclass(frozen=True)
class Trajectory:
    """One forward pass sampled on a uniform grid.

    ``controls[k]`` is the control held on ``[times[k], times[k+1])``; the last
    row repeats the final step's control so every instant has a value.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "states", _frozen(self.states))
        object.__setattr__(self, "controls", _frozen(self.controls))

    s = property(lambda self: self.states[:, 0])
    e = property(lambda self: self.states[:, 1])
    i = property(lambda self: self.states[:, 2])
    r = property(lambda self: self.states[:, 3])
    u = property(lambda self: self.controls[:, 0])
    h = property(lambda self: self.controls[:, 1])

    @property
    def step_controls(self) -> np.ndarray:
        return self.controls[:-1]

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.states[:, 2]))

    @property
    def peak_i(self) -> float:
        return float(self.states[self.peak_index, 2])

    @property
    def peak_time(self) -> float:
        return float(self.times[self.peak_index])

    @property
    def initial_state(self) -> EpidemicState:
        return EpidemicState.from_array(self.states[0])

    @property
    def final_state(self) -> EpidemicState:
        return EpidemicState.from_array(self.states[-1])

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])


def _n_steps(total: float, step: float, what: str, step_name: str) -> int:
    ratio = total / step
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"{step_name}={step!r} does not divide {what}={total!r}")
    return n


def seir_rhs(state: EpidemicState | Sequence[float], u: float, h: float,
             params: ModelParams) -> np.ndarray:
    """Right-hand side ``(ds, de, di, dr)/dt`` of the controlled system."""
    if h >= params.beta:
        raise ParameterError(f"h={h!r} must stay below beta={params.beta!r}")
    if isinstance(state, EpidemicState):
        s, e, i = state.s, state.e, state.i
    else:
        s, e, i = float(state[0]), float(state[1]), float(state[2])
    return np.array(_kernels._seir_f(s, e, i, params.beta - h, u, params.sigma, params.gamma))


def check_initial(x0: EpidemicState | Sequence[float]) -> np.ndarray:
    x = x0.as_array() if isinstance(x0, EpidemicState) else np.asarray(x0, dtype=float)
    if x.shape != (4,):
        raise ParameterError("initial state must have 4 components (s, e, i, r)")
    if np.any(x < 0) or np.any(x > 1):
        raise ParameterError(f"initial state {x.tolist()} outside [0, 1]^4")
    if abs(x.sum() - 1.0) > INITIAL_SUM_TOL:
        raise ParameterError(f"initial state sums to {x.sum()!r}; inputs are not rescaled")
    return x


def step_controls(schedule: ControlSchedule, horizon: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Expand cell values to one (u, h) pair per integration step."""
    per_cell = _n_steps(schedule.dt, dt, "schedule dt", "dt")
    n = _n_steps(horizon, dt, "horizon", "dt")
    if n > schedule.n_cells * per_cell:
        raise ParameterError(
            f"schedule covers {schedule.n_cells * schedule.dt!r} days, horizon is {horizon!r}")
    idx = np.arange(n) // per_cell
    return (np.ascontiguousarray(schedule.u_values[idx]),
            np.ascontiguousarray(schedule.h_values[idx]))


def _assemble(x, u_steps, h_steps, t0, dt, tol) -> Trajectory:
    n = len(u_steps)
    times = t0 + dt * np.arange(n + 1)
    controls = np.empty((n + 1, 2))
    controls[:-1, 0] = u_steps
    controls[:-1, 1] = h_steps
    controls[-1] = controls[-2]
    drift = np.max(np.abs(x.sum(axis=1) - 1.0))
    if drift > tol:
        raise InvariantError(f"conservation drift {drift:.3e} exceeds {tol:g}; reduce dt")
    return Trajectory(times, x, controls, dt)


def integrate(x0: EpidemicState | Sequence[float], schedule: ControlSchedule,
              params: ModelParams, horizon_T: float, dt: float = 0.01,
              conservation_tol: float = CONSERVATION_TOL) -> Trajectory:
    """Fixed-step RK4 over ``[t0, t0 + horizon_T]`` with cellwise-constant controls.

    Raises InvariantError if a component goes below ``-1e-12`` or the
    population sum drifts beyond ``conservation_tol``.
    """
    if not horizon_T > 0:
        raise ParameterError("horizon_T must be > 0")
    x = check_initial(x0)
    schedule.validate(params)
    u_steps, h_steps = step_controls(schedule, horizon_T, dt)
    states, bad = _kernels.rk4_forward(x, u_steps, h_steps, params.beta, params.sigma,
                                       params.gamma, dt, CLAMP_TOL)
    if bad >= 0:
        raise InvariantError(
            f"negative state component at t={schedule.t0 + (bad + 1) * dt:g}; reduce dt")
    return _assemble(states, u_steps, h_steps, schedule.t0, dt, conservation_tol)


Policy = Callable[[float, np.ndarray], tuple]


def integrate_feedback(x0: EpidemicState | Sequence[float], policy: Policy,
                       params: ModelParams, horizon_T: float, dt: float = 0.01,
                       t0: float = 0.0) -> Trajectory:
    """RK4 with a state-feedback control ``policy(t, x) -> (u, h)``.

    The policy is evaluated at every RK4 stage, so a feedback law such as the
    boundary-maintenance suppression acts continuously rather than per cell.
    Recorded controls are the policy values at the sample instants.
    """
    x = check_initial(x0)
    n = _n_steps(horizon_T, dt, "horizon", "dt")
    p = params

    def f(t, y):
        u, h = policy(t, y)
        if not (0 <= u <= p.u_max + 1e-15 and 0 <= h <= p.h_max + 1e-15):
            raise ParameterError(f"policy returned inadmissible control ({u}, {h}) at t={t}")
        if t < p.t_delay_u:
            u = 0.0
        if t < p.t_delay_h:
            h = 0.0
        return np.array(_kernels._seir_f(y[0], y[1], y[2], p.beta - h, u, p.sigma, p.gamma)), u, h

    states = np.empty((n + 1, 4))
    controls = np.empty((n + 1, 2))
    states[0] = x
    for k in range(n):
        t = t0 + k * dt
        k1, u, h = f(t, x)
        controls[k] = u, h
        k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)[0]
        k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)[0]
        k4 = f(t + dt, x + dt * k3)[0]
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(x < -CLAMP_TOL):
            raise InvariantError(f"negative state component at t={t + dt:g}; reduce dt")
        x = np.maximum(x, 0.0)
        states[k + 1] = x
    _, u, h = f(t0 + n * dt, x)
    controls[n] = u, h
    times = t0 + dt * np.arange(n + 1)
    drift = np.max(np.abs(states.sum(axis=1) - 1.0))
    if drift > CONSERVATION_TOL:
        raise InvariantError(f"conservation drift {drift:.3e}; reduce dt")
    return Trajectory(times, states, controls, dt)


def cumulative_trapezoid(y: np.ndarray, dx: float) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    out[1:] = np.cumsum(0.5 * dx * (y[1:] + y[:-1]))
    return out


def integral_identity_residual(traj: Trajectory, params: ModelParams) -> float:
    """Max mismatch in the non-recovered balance ``X(t) - X0 = -int(u s + gamma i)``.

    The outflow is integrated stepwise with the step's own control at both
    endpoints, which is exact trapezoid quadrature for cellwise controls.
    """
    s, i = traj.s, traj.i
    u = traj.step_controls[:, 0]
    left = u * s[:-1] + params.gamma * i[:-1]
    right = u * s[1:] + params.gamma * i[1:]
    outflow = np.zeros(len(s))
    outflow[1:] = np.cumsum(0.5 * traj.dt * (left + right))
    x = traj.states[:, :3].sum(axis=1)
    return float(np.max(np.abs(x - x[0] + outflow)))
