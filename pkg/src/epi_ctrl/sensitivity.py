"""Parameter sweeps, outcome correlations and capacity shadow values."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .cost import evaluate_cost
from .errors import DegenerateError, EpiCtrlError, ParameterError
from .pmp import OptimizationResult, SolverConfig, forward_backward_sweep
from .scenario import Scenario, SweepSpec
from .seir import ControlSchedule, EpidemicState, ModelParams, integrate

log = logging.getLogger(__name__)

_MODEL_FIELDS = ("beta", "u_max", "h_max", "t_delay_u", "t_delay_h", "i_max")


@dataclass(frozen=True)
class SweepRow:
    index: int
    values: dict
    J_T: float = math.nan
    peak_i: float = math.nan
    final_size: float = math.nan
    max_violation: float = math.nan
    converged: bool = False
    error: str = ""

    @property
    def value(self) -> float:
        """The swept value of a one-parameter sweep."""
        if len(self.values) != 1:
            raise ParameterError("row carries several swept parameters")
        return next(iter(self.values.values()))


def _apply(base: Scenario, values: dict):
    model_kw = {k: v for k, v in values.items() if k in _MODEL_FIELDS}
    model = base.model.replace(**model_kw) if model_kw else base.model
    cost = base.cost.replace(kappa=values["kappa"]) if "kappa" in values else base.cost
    return model, cost


def _run_row(args) -> SweepRow:
    index, base, values, mode = args
    try:
        model, cost = _apply(base, values)
        if mode == "simulate":
            traj = integrate(base.initial, base.control_schedule(model), model, base.horizon, base.dt)
            br = evaluate_cost(traj, cost, model.i_max, model)
            converged = True
        else:
            res = forward_backward_sweep(base.initial, None, model, cost, base.horizon, base.solver)
            traj, br, converged = res.trajectory, res.cost, res.converged
        return SweepRow(index, values, br.total, traj.peak_i, float(1.0 - traj.s[-1]),
                        br.max_violation, converged)
    except (EpiCtrlError, ArithmeticError, ValueError) as exc:
        log.warning("sweep row %d (%s) failed: %s", index, values, exc)
        return SweepRow(index, values, error=f"{type(exc).__name__}: {exc}")


def sweep_points(spec: SweepSpec, base: Scenario, seed: int | None = None) -> list[dict]:
    """Parameter assignments in sweep order.

    A randomized spec draws a scrambled Latin hypercube sample (seeded by
    ``seed``, else the scenario seed) scaled to the configured ranges.
    """
    if not spec.randomized:
        for v in spec.values:
            _apply(base, {spec.parameter: v})  # raises on an invalid value, e.g. h_max >= beta
        return [{spec.parameter: float(v)} for v in spec.values]
    names = [r[0] for r in spec.ranges]
    lo = np.array([r[1] for r in spec.ranges])
    hi = np.array([r[2] for r in spec.ranges])
    sampler = qmc.LatinHypercube(d=len(names), seed=base.seed if seed is None else seed)
    pts = lo + sampler.random(spec.samples) * (hi - lo)
    return [{n: float(x) for n, x in zip(names, row)} for row in pts]


def run_sweep(spec: SweepSpec, base: Scenario, workers: int = 1,
              seed: int | None = None) -> list[SweepRow]:
    """One pipeline run per sweep point; rows keep sweep order even when run in parallel.

    Failures (for example a sampled ``h_max >= beta``) are recorded on the
    row and the sweep carries on.
    """
    jobs = [(k, base, vals, spec.mode) for k, vals in enumerate(sweep_points(spec, base, seed))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_row, jobs))
    return [_run_row(j) for j in jobs]


def pearson_correlation(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ParameterError("samples must be 1-D and of equal length")
    if len(x) < 3:
        raise ParameterError("need at least 3 samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ParameterError("samples must be finite")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateError("a sample has zero variance")
    r = float(np.corrcoef(x, y)[0, 1])
    return min(1.0, max(-1.0, r))


def row_correlation(rows: list[SweepRow], xcol: str = "J_T", ycol: str = "peak_i") -> float:
    ok = [r for r in rows if not r.error and r.converged]

    def col(r, c):
        return r.values[c] if c in r.values else getattr(r, c)

    return pearson_correlation([col(r, xcol) for r in ok], [col(r, ycol) for r in ok])


def capacity_shadow_value(result: OptimizationResult, which: str, tol: float = 1e-9) -> float:
    """Marginal cost decrease per unit relaxation of ``u_max`` or ``h_max``.

    The bound multiplier on a cell is the negative part of its cell gradient
    when the control sits at the bound, and zero otherwise; the value is its
    integral over the horizon.
    """
    if which not in ("u_max", "h_max"):
        raise ParameterError("which must be 'u_max' or 'h_max'")
    if not result.converged:
        raise ParameterError("shadow values need a converged result")
    sched = result.schedule
    if which == "u_max":
        v, g, bound = sched.u_values, result.cell_gradient_u, result.params.u_max
        frozen = sched.delay_masks(result.params)[0]
    else:
        v, g, bound = sched.h_values, result.cell_gradient_h, result.params.h_max
        frozen = sched.delay_masks(result.params)[1]
    at_bound = (v >= bound - tol) & ~frozen
    return float(np.sum(np.maximum(0.0, -g[at_bound])) * sched.dt)


@dataclass(frozen=True)
class EnvelopeCheck:
    multiplier: float
    finite_difference: float
    bumped_converged: bool
    extra: dict = field(default_factory=dict)

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.multiplier), abs(self.finite_difference))
        return 0.0 if scale == 0 else abs(self.multiplier - self.finite_difference) / scale


def _resolve(result: OptimizationResult, x0, params: ModelParams, horizon, cfg) -> OptimizationResult:
    s = result.schedule
    init = ControlSchedule(s.t0, s.dt, np.minimum(s.u_values, params.u_max),
                           np.minimum(s.h_values, params.h_max))
    return forward_backward_sweep(x0, init, params, result.cost_params, horizon, cfg)


def envelope_check(result: OptimizationResult, x0: EpidemicState, which: str,
                   step: float = 1e-3, central: bool = False,
                   cfg: SolverConfig | None = None) -> EnvelopeCheck:
    """Compare the multiplier estimate with a finite difference of the solved value.

    The forward difference re-solves with the bound raised by ``step``;
    ``central`` also lowers it and uses the symmetric quotient.
    """
    mult = capacity_shadow_value(result, which)
    cfg = cfg or result.config
    p = result.params
    bound = getattr(p, which)
    up = _resolve(result, x0, p.replace(**{which: bound + step}), result.horizon, cfg)
    ok = up.converged
    if central:
        down = _resolve(result, x0, p.replace(**{which: bound - step}), result.horizon, cfg)
        ok &= down.converged
        fd = (down.cost.total - up.cost.total) / (2.0 * step)
    else:
        fd = (result.cost.total - up.cost.total) / step
    return EnvelopeCheck(mult, fd, ok)
