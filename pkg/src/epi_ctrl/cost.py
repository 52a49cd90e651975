"""Running cost, capacity penalty and discounted cost functionals."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError
from .seir import EpidemicState, ModelParams, Trajectory


@dataclass(frozen=True)
class CostParams:
    """Cost weights, discount rate and penalty weight.

    Defaults are scenario values, not calibrated figures.
    """

    c_h: float = 1.0
    c_nh: float = 1.0
    c_v: float = 0.5
    delta: float = 0.05
    kappa: float = 0.0

    def __post_init__(self):
        if min(self.c_h, self.c_nh, self.c_v) < 0:
            raise ParameterError("cost weights must be >= 0")
        if not self.delta > 0:
            raise ParameterError(f"delta must be > 0, got {self.delta!r}")
        if not self.kappa >= 0:
            raise ParameterError(f"kappa must be >= 0, got {self.kappa!r}")

    @property
    def is_zero(self) -> bool:
        return self.c_h == 0 and self.c_nh == 0 and self.c_v == 0 and self.kappa == 0

    def replace(self, **changes) -> "CostParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    suppression_part: float
    infection_part: float
    vaccination_part: float
    penalty_part: float
    max_violation: float
    feasible_strict: bool
    tail_bound: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "suppression_part": self.suppression_part,
            "infection_part": self.infection_part,
            "vaccination_part": self.vaccination_part,
            "penalty_part": self.penalty_part,
            "max_violation": self.max_violation,
            "feasible_strict": self.feasible_strict,
            "tail_bound": self.tail_bound,
        }


def running_cost_l0(state: EpidemicState, u: float, h: float, cp: CostParams) -> float:
    """Undiscounted running cost ``c_H i h + c_NH i + c_V u s``."""
    return cp.c_h * state.i * h + cp.c_nh * state.i + cp.c_v * u * state.s


def penalty_psi(i, i_max: float):
    """Squared capacity excess ``max(0, i - i_max)**2``."""
    excess = np.maximum(0.0, np.asarray(i, dtype=float) - i_max)
    out = excess * excess
    return float(out) if out.ndim == 0 else out


def penalty_psi_prime(i, i_max: float):
    d = 2.0 * np.maximum(0.0, np.asarray(i, dtype=float) - i_max)
    return float(d) if d.ndim == 0 else d


def tail_bound(cp: CostParams, params: ModelParams, horizon_T: float) -> float:
    """Upper bound on the discounted cost accrued after ``horizon_T``.

    Every state lies in the simplex, so the integrand never exceeds
    ``C = c_H h_max + c_NH + c_V u_max + kappa (1 - i_max)^2`` times the discount.
    """
    c = (cp.c_h * params.h_max + cp.c_nh + cp.c_v * params.u_max
         + cp.kappa * (1.0 - params.i_max) ** 2)
    return c * math.exp(-cp.delta * horizon_T) / cp.delta


def check_strict_feasibility(traj: Trajectory, i_max: float, tol: float = 1e-6) -> tuple[bool, float]:
    violation = float(max(0.0, np.max(traj.i) - i_max))
    return violation <= tol, violation


def _stepwise(values_left, values_right, disc, dt):
    # trapezoid per step; both ends use the step's held control
    return float(np.sum(0.5 * dt * (values_left * disc[:-1] + values_right * disc[1:])))


def evaluate_cost(traj: Trajectory, cp: CostParams, i_max: float,
                  params: ModelParams | None = None, feasibility_tol: float = 1e-6) -> CostBreakdown:
    """Discounted finite-horizon cost of a trajectory, split by component.

    Each step ``[t_k, t_{k+1}]`` is integrated by the trapezoid rule with the
    discount factor sampled at the endpoints and the step's own control at
    both ends (controls jump only at sample instants).  ``params`` is only
    needed for the infinite-horizon tail bound; without it the bound is NaN.
    """
    t = traj.times
    s, i = traj.s, traj.i
    u = traj.step_controls[:, 0]
    h = traj.step_controls[:, 1]
    disc = np.exp(-cp.delta * t)
    dt = traj.dt

    supp = _stepwise(cp.c_h * i[:-1] * h, cp.c_h * i[1:] * h, disc, dt)
    infc = _stepwise(cp.c_nh * i[:-1], cp.c_nh * i[1:], disc, dt)
    vacc = _stepwise(cp.c_v * u * s[:-1], cp.c_v * u * s[1:], disc, dt)
    psi = penalty_psi(i, i_max)
    pen = _stepwise(cp.kappa * psi[:-1], cp.kappa * psi[1:], disc, dt)

    feasible, violation = check_strict_feasibility(traj, i_max, feasibility_tol)
    tb = tail_bound(cp, params, traj.times[-1]) if params is not None else float("nan")
    return CostBreakdown(
        total=supp + infc + vacc + pen,
        suppression_part=supp,
        infection_part=infc,
        vaccination_part=vacc,
        penalty_part=pen,
        max_violation=violation,
        feasible_strict=feasible,
        tail_bound=tb,
    )
