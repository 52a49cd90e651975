"""Pontryagin conditions for the penalized finite-horizon problem.

The costates are integrated backward from zero, the switching functions are
the partial derivatives of the Hamiltonian with respect to ``u`` and ``h``, and
the forward-backward sweep (FBS) iterates forward pass, backward pass and
bang-bang control synthesis until the controls stop moving.

Controls live on cells of the schedule grid (typically 1 day), while states
and costates are sampled on the finer integration grid.  The cell gradient
``int_cell Phi dt / width`` is the exact first variation of the cost with
respect to that cell's value, so the sweep acts on it rather than on the
pointwise samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .analysis import boundary_maintenance_control
from .cost import CostBreakdown, CostParams, evaluate_cost
from .errors import BoundViolationError, NonFiniteError, ParameterError
from .seir import (ControlSchedule, EpidemicState, ModelParams, Trajectory,
                   _n_steps, check_initial, integrate, step_controls)

log = logging.getLogger(__name__)

SINGULAR_POLICIES = ("midpoint", "boundary-feedback")
AT_MAX, AT_MIN, SINGULAR = "at-max", "at-min", "singular"


@dataclass(frozen=True)
class AdjointState:
    lambda_s: float
    lambda_e: float
    lambda_i: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda_s, self.lambda_e, self.lambda_i])


@dataclass(frozen=True)
class AdjointTrajectory:
    times: np.ndarray
    values: np.ndarray  # columns lambda_s, lambda_e, lambda_i

    lambda_s = property(lambda self: self.values[:, 0])
    lambda_e = property(lambda self: self.values[:, 1])
    lambda_i = property(lambda self: self.values[:, 2])

    def __getitem__(self, k) -> AdjointState:
        return AdjointState(*map(float, self.values[k]))


@dataclass(frozen=True)
class SwitchingSample:
    t: float
    phi_u: float
    phi_h: float
    regime_u: str
    regime_h: str


@dataclass(frozen=True)
class Switching:
    """Switching functions sampled on the integration grid."""

    times: np.ndarray
    phi_u: np.ndarray
    phi_h: np.ndarray
    band: float

    @property
    def regime_u(self) -> np.ndarray:
        return classify(self.phi_u, self.band)

    @property
    def regime_h(self) -> np.ndarray:
        return classify(self.phi_h, self.band)

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k) -> SwitchingSample:
        return SwitchingSample(float(self.times[k]), float(self.phi_u[k]), float(self.phi_h[k]),
                               str(self.regime_u[k]), str(self.regime_h[k]))


def classify(phi: np.ndarray, band: float) -> np.ndarray:
    out = np.full(np.shape(phi), SINGULAR, dtype=object)
    out[phi < -band] = AT_MAX
    out[phi > band] = AT_MIN
    return out


@dataclass(frozen=True)
class SolverConfig:
    """Sweep settings.

    ``sing_tol`` is relative: the switching band is ``sing_tol * (1 + scale)``
    with ``scale`` the largest cell gradient magnitude.  ``dt`` is the
    integration step and ``control_dt`` the width of a control cell.
    """

    max_iters: int = 400
    damping: float = 0.5
    conv_tol: float = 1e-9
    sing_tol: float = 1e-8
    singular_policy: str = "midpoint"
    dt: float = 0.01
    control_dt: float = 1.0
    adaptive: bool = True

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ParameterError(f"damping must lie in (0, 1], got {self.damping!r}")
        if not self.conv_tol > 0:
            raise ParameterError("conv_tol must be > 0")
        if self.sing_tol < 0:
            raise ParameterError("sing_tol must be >= 0")
        if self.max_iters < 0:
            raise ParameterError("max_iters must be >= 0")
        if self.singular_policy not in SINGULAR_POLICIES:
            raise ParameterError(f"singular_policy must be one of {SINGULAR_POLICIES}")
        _n_steps(self.control_dt, self.dt, "control_dt", "dt")

    def replace(self, **changes) -> "SolverConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class OptimizationResult:
    schedule: ControlSchedule
    trajectory: Trajectory
    adjoints: AdjointTrajectory
    switching: Switching
    cost: CostBreakdown
    iterations: int
    converged: bool
    control_residual_history: list
    initial_schedule: ControlSchedule
    initial_cost: CostBreakdown
    cell_gradient_u: np.ndarray
    cell_gradient_h: np.ndarray
    kkt_residual: float
    params: ModelParams
    cost_params: CostParams
    config: SolverConfig

    @property
    def sing_band(self) -> float:
        return self.switching.band

    @property
    def horizon(self) -> float:
        return self.trajectory.horizon


def adjoint_rhs(t: float, adj: AdjointState, state: EpidemicState, u: float, h: float,
                params: ModelParams, cp: CostParams) -> np.ndarray:
    """Time derivative of the costates, ``-dH/dx``."""
    p = params
    return np.array(_kernels._adj_f(
        t, adj.lambda_s, adj.lambda_e, adj.lambda_i, state.s, state.i, u, h,
        p.beta, p.sigma, p.gamma, cp.c_h, cp.c_nh, cp.c_v, cp.delta, cp.kappa, p.i_max))


def _adjoint_values(traj: Trajectory, params: ModelParams, cp: CostParams) -> np.ndarray:
    p = params
    ctrl = traj.step_controls
    lam = _kernels.rk4_adjoint(
        np.ascontiguousarray(traj.states), np.ascontiguousarray(ctrl[:, 0]),
        np.ascontiguousarray(ctrl[:, 1]), float(traj.times[0]), traj.dt,
        p.beta, p.sigma, p.gamma, cp.c_h, cp.c_nh, cp.c_v, cp.delta, cp.kappa, p.i_max)
    if not np.all(np.isfinite(lam)):
        bad = int(np.argmax(~np.all(np.isfinite(lam), axis=1)))
        raise NonFiniteError(f"non-finite costate at t={traj.times[bad]:g}; reduce dt")
    return lam


def integrate_adjoint(traj: Trajectory, schedule: ControlSchedule, params: ModelParams,
                      cp: CostParams) -> AdjointTrajectory:
    """Backward RK4 for the costates on the trajectory's grid, ``lambda(T) = 0``."""
    u_steps, h_steps = step_controls(schedule, traj.horizon, traj.dt)
    if not (np.array_equal(u_steps, traj.step_controls[:, 0])
            and np.array_equal(h_steps, traj.step_controls[:, 1])):
        raise ParameterError("schedule does not match the trajectory's controls")
    return AdjointTrajectory(traj.times.copy(), _adjoint_values(traj, params, cp))


def switching_functions(state: EpidemicState, adj: AdjointState, t: float,
                        cp: CostParams) -> tuple[float, float]:
    """``(Phi_u, Phi_h)``: partial derivatives of the Hamiltonian in ``u`` and ``h``."""
    disc = math.exp(-cp.delta * t)
    phi_u = state.s * (cp.c_v * disc - adj.lambda_s)
    phi_h = state.i * (cp.c_h * disc + state.s * (adj.lambda_s - adj.lambda_e))
    return phi_u, phi_h


def switching_arrays(traj: Trajectory, lam: np.ndarray, cp: CostParams) -> tuple[np.ndarray, np.ndarray]:
    disc = np.exp(-cp.delta * traj.times)
    s, i = traj.s, traj.i
    phi_u = s * (cp.c_v * disc - lam[:, 0])
    phi_h = i * (cp.c_h * disc + s * (lam[:, 0] - lam[:, 1]))
    return phi_u, phi_h


def _bang(phi, band, hi, mid):
    return np.where(phi < -band, hi, np.where(phi > band, 0.0, mid))


def control_from_switching(phi_u: float, phi_h: float, t: float, params: ModelParams,
                           cfg: SolverConfig, state: EpidemicState,
                           band: float | None = None) -> tuple[float, float]:
    """Minimize the Hamiltonian in ``(u, h)`` given the switching values.

    Outside the band ``|Phi| <= band`` (default ``cfg.sing_tol``) the law is
    bang-bang.  Inside it, ``midpoint`` returns the middle of the box and
    ``boundary-feedback`` uses the capacity-holding suppression for ``h``.
    Delay windows override everything.
    """
    band = cfg.sing_tol if band is None else band
    u = float(_bang(phi_u, band, params.u_max, 0.5 * params.u_max))
    h_mid = 0.5 * params.h_max
    if cfg.singular_policy == "boundary-feedback":
        h_mid = boundary_maintenance_control(state.s, params)[0]
    h = float(_bang(phi_h, band, params.h_max, h_mid))
    if t < params.t_delay_u:
        u = 0.0
    if t < params.t_delay_h:
        h = 0.0
    return u, h


def cell_gradients(traj: Trajectory, phi_u: np.ndarray, phi_h: np.ndarray,
                   schedule: ControlSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell ``int_cell Phi dt / width`` by the trapezoid rule on the samples."""
    m = _n_steps(schedule.dt, traj.dt, "schedule dt", "dt")
    n_steps = len(traj.times) - 1
    if n_steps != m * schedule.n_cells:
        raise ParameterError("schedule must cover exactly the trajectory horizon")

    def per_cell(phi):
        steps = 0.5 * traj.dt * (phi[:-1] + phi[1:])
        return steps.reshape(schedule.n_cells, m).sum(axis=1) / schedule.dt

    return per_cell(phi_u), per_cell(phi_h)


def cell_peaks(phi: np.ndarray, m: int) -> np.ndarray:
    """Max ``|Phi|`` over each cell's samples, endpoints included."""
    a = np.abs(phi)
    body = a[:-1].reshape(-1, m).max(axis=1)
    return np.maximum(body, a[m::m])


def _cell_means(x: np.ndarray, m: int) -> np.ndarray:
    n_cells = (len(x) - 1) // m
    mids = 0.5 * (x[:-1] + x[1:])
    return mids.reshape(n_cells, m).mean(axis=1)


@dataclass
class _Point:
    u: np.ndarray
    h: np.ndarray
    schedule: ControlSchedule
    traj: Trajectory
    cost: CostBreakdown
    lam: np.ndarray | None = None
    phi_u: np.ndarray | None = None
    phi_h: np.ndarray | None = None
    g_u: np.ndarray | None = None
    g_h: np.ndarray | None = None
    peak_u: np.ndarray | None = None  # max |Phi_u| over each cell
    peak_h: np.ndarray | None = None


class _Problem:
    def __init__(self, x0, template: ControlSchedule, params, cp, horizon_T, dt):
        self.x0 = x0
        self.template = template
        self.params = params
        self.cp = cp
        self.horizon = horizon_T
        self.dt = dt

    def evaluate(self, u, h) -> _Point:
        sched = self.template.with_values(u, h)
        traj = integrate(self.x0, sched, self.params, self.horizon, self.dt)
        cost = evaluate_cost(traj, self.cp, self.params.i_max, self.params)
        if not math.isfinite(cost.total):
            raise NonFiniteError("cost evaluated to a non-finite value")
        return _Point(np.array(u, dtype=float), np.array(h, dtype=float), sched, traj, cost)

    def differentiate(self, pt: _Point) -> _Point:
        pt.lam = _adjoint_values(pt.traj, self.params, self.cp)
        pt.phi_u, pt.phi_h = switching_arrays(pt.traj, pt.lam, self.cp)
        pt.g_u, pt.g_h = cell_gradients(pt.traj, pt.phi_u, pt.phi_h, pt.schedule)
        m = (len(pt.traj.times) - 1) // pt.schedule.n_cells
        pt.peak_u = cell_peaks(pt.phi_u, m)
        pt.peak_h = cell_peaks(pt.phi_h, m)
        return pt


def _kkt_residual(pt: _Point, params: ModelParams, frozen_u, frozen_h, tol=1e-9) -> float:
    worst = 0.0
    for v, g, hi, frozen in ((pt.u, pt.g_u, params.u_max, frozen_u),
                             (pt.h, pt.g_h, params.h_max, frozen_h)):
        free = ~frozen
        at_min = free & (v <= tol)
        at_max = free & (v >= hi - tol) & ~at_min
        inner = free & ~at_min & ~at_max
        parts = [np.maximum(0.0, -g[at_min]), np.maximum(0.0, g[at_max]), np.abs(g[inner])]
        for part in parts:
            if part.size:
                worst = max(worst, float(part.max()))
    return worst


def _targets(pt: _Point, params: ModelParams, cfg: SolverConfig, band: float,
             frozen_u, frozen_h, m: int):
    """Per-cell targets and the masks of singular cells.

    A cell is singular when ``|Phi|`` stays inside the band on the whole cell;
    it then gets the singular-policy value.  Otherwise the target is the
    bound selected by the sign of the cell gradient, so a cell containing a
    switching instant is driven toward ``g = 0`` by the step-size bisection.
    """
    sing_u = pt.peak_u <= band
    sing_h = pt.peak_h <= band
    if cfg.singular_policy == "boundary-feedback":
        s_cell = _cell_means(pt.traj.s, m)
        h_mid = np.array([boundary_maintenance_control(s, params)[0] for s in s_cell])
    else:
        h_mid = np.full(len(pt.h), 0.5 * params.h_max)
    tu = np.where(pt.g_u < 0, params.u_max, np.where(pt.g_u > 0, 0.0, pt.u))
    th = np.where(pt.g_h < 0, params.h_max, np.where(pt.g_h > 0, 0.0, pt.h))
    tu = np.where(sing_u, 0.5 * params.u_max, tu)
    th = np.where(sing_h, h_mid, th)
    tu = np.where(frozen_u, 0.0, tu)
    th = np.where(frozen_h, 0.0, th)
    return tu, th, sing_u & ~frozen_u, sing_h & ~frozen_h


def _band(pt: _Point, cfg: SolverConfig) -> float:
    scale = max(float(np.max(np.abs(pt.g_u))), float(np.max(np.abs(pt.g_h))))
    return cfg.sing_tol * (1.0 + scale)


def default_schedule(params: ModelParams, horizon_T: float, cfg: SolverConfig,
                     u: float = 0.0, h: float = 0.0) -> ControlSchedule:
    return ControlSchedule.constant(params, horizon_T, cfg.control_dt, u, h)


def forward_backward_sweep(x0: EpidemicState, init: ControlSchedule | None, params: ModelParams,
                           cp: CostParams, horizon_T: float,
                           cfg: SolverConfig = SolverConfig()) -> OptimizationResult:
    """Solve the penalized finite-horizon problem by forward-backward sweep.

    Each iteration targets the bang-bang control implied by the cell
    gradients and moves toward it with a damped update.  With
    ``cfg.adaptive`` each cell moves by at most ``omega * bound`` toward its
    target, with ``omega`` kept per cell: it is halved whenever the cell's
    direction reverses (which bisects cells containing a switching instant)
    and relaxed back toward ``cfg.damping`` otherwise.  An update that raises
    the cost is retried with all step lengths halved.  Without ``adaptive`` the
    update is the plain ``(1 - d) v_old + d v_new``.

    Non-convergence is reported through ``converged=False``; NaNs raise.
    """
    x0a = check_initial(x0)
    if init is None:
        init = default_schedule(params, horizon_T, cfg)
    init.validate(params)
    n_cells = _n_steps(horizon_T, init.dt, "horizon", "schedule dt")
    if n_cells != init.n_cells:
        raise ParameterError("initial schedule must cover exactly [t0, t0 + horizon_T]")
    m = _n_steps(init.dt, cfg.dt, "schedule dt", "dt")
    frozen_u, frozen_h = init.delay_masks(params)
    prob = _Problem(x0a, init, params, cp, horizon_T, cfg.dt)

    start = prob.differentiate(prob.evaluate(init.u_values, init.h_values))
    initial_cost = start.cost
    history: list[float] = []

    if cp.is_zero:
        # zero objective: every control is optimal, return the zero control
        pt = prob.differentiate(prob.evaluate(np.zeros(n_cells), np.zeros(n_cells)))
        history.append(float(max(np.max(np.abs(init.u_values)), np.max(np.abs(init.h_values)))))
        return _result(pt, init, initial_cost, 1, True, history, params, cp, cfg,
                       frozen_u, frozen_h)

    pt = start
    omega_u = np.full(n_cells, cfg.damping)
    omega_h = np.full(n_cells, cfg.damping)
    prev_du = np.zeros(n_cells)
    prev_dh = np.zeros(n_cells)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        band = _band(pt, cfg)
        tu, th, in_band_u, in_band_h = _targets(pt, params, cfg, band, frozen_u, frozen_h, m)
        du, dh = tu - pt.u, th - pt.h

        if not cfg.adaptive:
            new = prob.evaluate(pt.u + cfg.damping * du, pt.h + cfg.damping * dh)
        else:
            for omega, d, prev in ((omega_u, du, prev_du), (omega_h, dh, prev_dh)):
                flip = np.sign(d) * np.sign(prev) < 0
                omega[flip] *= 0.5
                omega[~flip] = np.minimum(cfg.damping, omega[~flip] * 1.25)
            prev_du, prev_dh = du, dh
            new = None
            for _ in range(40):
                # step length omega * bound, never past the target
                cand_u = pt.u + np.sign(du) * np.minimum(np.abs(du), omega_u * params.u_max)
                cand_h = pt.h + np.sign(dh) * np.minimum(np.abs(dh), omega_h * params.h_max)
                # moves inside the band are cost-neutral to first order; allow
                # the increase they predict so the singular policy can act
                allowance = init.dt * (
                    np.sum(np.maximum(0.0, pt.g_u * (cand_u - pt.u))[in_band_u])
                    + np.sum(np.maximum(0.0, pt.g_h * (cand_h - pt.h))[in_band_h]))
                trial = prob.evaluate(cand_u, cand_h)
                if trial.cost.total <= (pt.cost.total + 1e-13 * (1.0 + abs(pt.cost.total))
                                        + 2.0 * allowance):
                    new = trial
                    break
                omega_u *= 0.5
                omega_h *= 0.5
            if new is None:
                # no descent even for tiny steps: stationary to working precision
                history.append(0.0)
                converged = True
                break

        change = float(max(np.max(np.abs(new.u - pt.u)), np.max(np.abs(new.h - pt.h))))
        history.append(change)
        pt = prob.differentiate(new)
        log.debug("fbs iter %d cost %.12g change %.3e", iterations, pt.cost.total, change)
        if change <= cfg.conv_tol:
            converged = True
            break

    if converged and pt.cost.total > initial_cost.total + 1e-9:
        log.warning("sweep converged to a cost above the initial guess; keeping the initial guess")
        pt = start
    return _result(pt, init, initial_cost, iterations, converged, history, params, cp, cfg,
                   frozen_u, frozen_h)


def _result(pt: _Point, init, initial_cost, iterations, converged, history, params, cp, cfg,
            frozen_u, frozen_h) -> OptimizationResult:
    band = _band(pt, cfg)
    return OptimizationResult(
        schedule=pt.schedule,
        trajectory=pt.traj,
        adjoints=AdjointTrajectory(pt.traj.times.copy(), pt.lam),
        switching=Switching(pt.traj.times.copy(), pt.phi_u, pt.phi_h, band),
        cost=pt.cost,
        iterations=iterations,
        converged=converged,
        control_residual_history=list(history),
        initial_schedule=init,
        initial_cost=initial_cost,
        cell_gradient_u=pt.g_u,
        cell_gradient_h=pt.g_h,
        kkt_residual=_kkt_residual(pt, params, frozen_u, frozen_h),
        params=params,
        cost_params=cp,
        config=cfg,
    )


@dataclass(frozen=True)
class GradientCheck:
    adjoint_gradient: float
    fd_gradient: float
    frozen: bool = False


def gradient_check(x0: EpidemicState, schedule: ControlSchedule, params: ModelParams,
                   cp: CostParams, horizon_T: float, cell_index: int, control_kind: str,
                   epsilon: float = 1e-5, dt: float = 0.01) -> GradientCheck:
    """Compare the adjoint cell gradient with a central finite difference.

    Both values are per unit time: the finite difference of the cost under a
    ``+-epsilon`` bump of one cell is divided by the cell width, matching
    ``int_cell Phi dt / width``.
    """
    if control_kind not in ("u", "h"):
        raise ParameterError("control_kind must be 'u' or 'h'")
    frozen_u, frozen_h = schedule.delay_masks(params)
    if (frozen_u if control_kind == "u" else frozen_h)[cell_index]:
        return GradientCheck(0.0, 0.0, frozen=True)

    values = {"u": schedule.u_values.copy(), "h": schedule.h_values.copy()}
    bound = params.u_max if control_kind == "u" else params.h_max
    v = values[control_kind][cell_index]
    if v - epsilon < 0 or v + epsilon > bound:
        raise BoundViolationError(
            f"bump of {epsilon:g} around {control_kind}={v:g} leaves [0, {bound:g}]")

    x0a = check_initial(x0)
    traj = integrate(x0a, schedule, params, horizon_T, dt)
    lam = _adjoint_values(traj, params, cp)
    phi_u, phi_h = switching_arrays(traj, lam, cp)
    g_u, g_h = cell_gradients(traj, phi_u, phi_h, schedule)
    adj_grad = float((g_u if control_kind == "u" else g_h)[cell_index])

    def cost_with(delta):
        vals = {k: a.copy() for k, a in values.items()}
        vals[control_kind][cell_index] = v + delta
        sched = schedule.with_values(vals["u"], vals["h"])
        tr = integrate(x0a, sched, params, horizon_T, dt)
        return evaluate_cost(tr, cp, params.i_max).total

    fd = (cost_with(epsilon) - cost_with(-epsilon)) / (2.0 * epsilon * schedule.dt)
    return GradientCheck(adj_grad, float(fd))


@dataclass(frozen=True)
class Arc:
    start: float
    end: float
    kind: str
    residual: float = 0.0
    verified: bool = True

    @property
    def length(self) -> float:
        return self.end - self.start


def _runs(mask: np.ndarray):
    if not mask.any():
        return []
    padded = np.concatenate(([False], mask, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(int)))
    return list(zip(edges[0::2], edges[1::2] - 1))


def detect_arcs(traj: Trajectory, params: ModelParams, min_length: float,
                phi_u: np.ndarray | None = None, phi_h: np.ndarray | None = None,
                band: float = 0.0, state_tol: float = 1e-6) -> list[Arc]:
    """Maximal intervals of singular switching or of the state pinned at capacity.

    Boundary-maintenance arcs also report ``max |sigma e - gamma i_max|`` over
    the arc; ``verified`` holds when it is at most ``10 * state_tol``.
    """
    t = traj.times
    arcs: list[Arc] = []
    for kind, phi in (("singular-h", phi_h), ("singular-u", phi_u)):
        if phi is None:
            continue
        for a, b in _runs(np.abs(phi) <= band):
            if t[b] - t[a] >= min_length:
                arcs.append(Arc(float(t[a]), float(t[b]), kind))
    pinned = np.abs(traj.i - params.i_max) <= state_tol
    for a, b in _runs(pinned):
        if t[b] - t[a] >= min_length:
            resid = float(np.max(np.abs(params.sigma * traj.e[a:b + 1] - params.gamma * params.i_max)))
            arcs.append(Arc(float(t[a]), float(t[b]), "boundary-maintenance", resid,
                            resid <= 10 * state_tol))
    arcs.sort(key=lambda arc: (arc.start, arc.kind))
    return arcs


def detect_singular_arcs(result: OptimizationResult, min_length: float,
                         state_tol: float = 1e-6) -> list[Arc]:
    return detect_arcs(result.trajectory, result.params, min_length,
                       result.switching.phi_u, result.switching.phi_h,
                       result.sing_band, state_tol)
