"""Penalty-weight and horizon ladders over repeated sweep solves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cost import CostParams, tail_bound
from .errors import ParameterError
from .pmp import OptimizationResult, SolverConfig, forward_backward_sweep
from .seir import ControlSchedule, EpidemicState, ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Rung:
    value: float
    cost: float
    max_violation: float
    sup_distance: float
    converged: bool
    cost_gap: float = float("nan")
    tail_bound: float = float("nan")


@dataclass
class ContinuationReport:
    ladder: list[Rung]
    warm_started: bool
    results: list[OptimizationResult] = field(default_factory=list, repr=False)
    flagged_converged: bool = False

    def __post_init__(self):
        if not self.ladder:
            raise ParameterError("continuation report needs at least one rung")
        vals = [r.value for r in self.ladder]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ParameterError("ladder values must be strictly increasing")

    @property
    def values(self) -> list[float]:
        return [r.value for r in self.ladder]

    @property
    def costs(self) -> list[float]:
        return [r.cost for r in self.ladder]

    @property
    def violations(self) -> list[float]:
        return [r.max_violation for r in self.ladder]


def _check_ladder(ladder, name):
    vals = [float(v) for v in ladder]
    if not vals:
        raise ParameterError(f"{name} ladder is empty")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ParameterError(f"{name} ladder must be strictly increasing, got {vals}")
    return vals


def _solve(x0, init, params, cp, horizon, cfg) -> OptimizationResult:
    res = forward_backward_sweep(x0, init, params, cp, horizon, cfg)
    if not res.converged and cfg.damping > 0.1:
        # one retry with gentler steps before giving up on the rung
        log.info("rung did not converge; retrying with damping %.3g", cfg.damping / 2)
        retry = forward_backward_sweep(x0, init, params, cp, horizon,
                                       replace(cfg, damping=cfg.damping / 2))
        if retry.converged:
            return retry
    return res


def _restrict(schedule: ControlSchedule, n_cells: int) -> np.ndarray:
    return np.concatenate([schedule.u_values[:n_cells], schedule.h_values[:n_cells]])


def kappa_continuation(x0: EpidemicState, params: ModelParams, cp_base: CostParams,
                       horizon_T: float, kappa_ladder, cfg: SolverConfig = SolverConfig(),
                       warm_start: bool = True) -> ContinuationReport:
    """Solve once per penalty weight, warm-starting from the last converged rung."""
    kappas = _check_ladder(kappa_ladder, "kappa")
    rungs, results = [], []
    warm: ControlSchedule | None = None
    prev: ControlSchedule | None = None
    for k in kappas:
        res = _solve(x0, warm if warm_start else None, params, cp_base.replace(kappa=k),
                     horizon_T, cfg)
        sched = res.schedule
        dist = 0.0 if prev is None else float(np.max(np.abs(
            _restrict(sched, sched.n_cells) - _restrict(prev, prev.n_cells))))
        rungs.append(Rung(k, res.cost.total, res.cost.max_violation, dist, res.converged))
        results.append(res)
        if res.converged:
            warm = sched
        else:
            log.warning("kappa=%g rung did not converge", k)
        prev = sched
    return ContinuationReport(rungs, warm_start, results)


def horizon_continuation(x0: EpidemicState, params: ModelParams, cp: CostParams, T_ladder,
                         cfg: SolverConfig = SolverConfig(),
                         warm_start: bool = True) -> ContinuationReport:
    """Solve on growing horizons and compare costs against the analytic tail bound.

    A warm start extends the previous solution by zero controls.  The report is
    flagged converged when every successive cost gap is at most the tail bound
    of the shorter horizon plus ``cfg.conv_tol``.
    """
    horizons = _check_ladder(T_ladder, "horizon")
    rungs, results = [], []
    warm: ControlSchedule | None = None
    prev: OptimizationResult | None = None
    flagged = True
    for T in horizons:
        init = None
        if warm_start and warm is not None:
            n_new = int(round(T / warm.dt))
            pad = np.zeros(n_new - warm.n_cells)
            init = ControlSchedule.constant(params, T, warm.dt, 0.0, 0.0, warm.t0).with_values(
                np.concatenate([warm.u_values, pad]), np.concatenate([warm.h_values, pad]))
        res = _solve(x0, init, params, cp, T, cfg)
        gap, bound, dist = float("nan"), float("nan"), 0.0
        if prev is not None:
            gap = abs(res.cost.total - prev.cost.total)
            bound = tail_bound(cp, params, prev.horizon)
            n = prev.schedule.n_cells
            dist = float(np.max(np.abs(_restrict(res.schedule, n) - _restrict(prev.schedule, n))))
            flagged &= gap <= bound + cfg.conv_tol
        rungs.append(Rung(T, res.cost.total, res.cost.max_violation, dist, res.converged,
                          gap, bound))
        results.append(res)
        if res.converged:
            warm = res.schedule
        prev = res
    flagged &= all(r.converged for r in rungs)
    return ContinuationReport(rungs, warm_start, results, flagged)


def early_sup_distance(a: OptimizationResult, b: OptimizationResult, t_end: float) -> float:
    """Sup-norm gap between two solutions' controls on cells starting before ``t_end``."""
    sa, sb = a.schedule, b.schedule
    if sa.dt != sb.dt or sa.t0 != sb.t0:
        raise ParameterError("schedules must share a grid")
    n = min(sa.n_cells, sb.n_cells, int(np.sum(sa.cell_starts < t_end - 1e-12)))
    return float(np.max(np.abs(_restrict(sa, n) - _restrict(sb, n))))
