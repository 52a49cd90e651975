"""Scenario files: a flat ``section.key = value`` text format, or JSON.

Values in the text format are JSON literals (numbers, ``true``, lists,
objects); anything that is not valid JSON is taken as a bare string, so
``mode = optimize`` and ``mode = "optimize"`` are equivalent.  ``#`` starts a
comment.  A ``.json`` file holds the same keys either flat or nested.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .cost import CostParams
from .errors import EpiCtrlError, ScenarioError
from .pmp import SolverConfig
from .seir import ControlSchedule, EpidemicState, ModelParams, _n_steps

MODES = ("simulate", "optimize", "kappa-continuation", "horizon-continuation",
         "sweep", "final-size")
SWEEP_PARAMETERS = ("beta", "u_max", "h_max", "t_delay_u", "t_delay_h", "kappa", "i_max")
H_FEEDBACKS = ("none", "boundary-maintenance")

_MODEL_KEYS = {f.name for f in fields(ModelParams)}
_COST_KEYS = {f.name for f in fields(CostParams)}
_SOLVER_KEYS = {f.name for f in fields(SolverConfig)} - {"dt"}

KNOWN_KEYS = (
    {"mode", "seed", "horizon", "dt"}
    | {f"model.{k}" for k in _MODEL_KEYS}
    | {f"cost.{k}" for k in _COST_KEYS}
    | {f"initial.{k}" for k in ("s", "e", "i", "r")}
    | {f"solver.{k}" for k in _SOLVER_KEYS}
    | {"schedule.dt", "schedule.u", "schedule.h", "schedule.h_feedback"}
    | {"continuation.kappa_ladder", "continuation.horizon_ladder", "continuation.warm_start"}
    | {"sweep.parameter", "sweep.values", "sweep.grid", "sweep.mode", "sweep.samples",
       "sweep.ranges", "sweep.correlate"}
    | {"arcs.min_length", "arcs.state_tol", "shadow.fd_check", "shadow.fd_step"}
)


@dataclass(frozen=True)
class ControlSpec:
    """Recipe for one control signal.

    ``value`` is a scalar (constant), a list of per-cell values, or a list of
    ``[t_start, value]`` breakpoints (piecewise constant from each start).
    """

    value: Any = 0.0

    def build(self, n_cells: int, dt: float, t0: float = 0.0) -> np.ndarray:
        v = self.value
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return np.full(n_cells, float(v))
        if isinstance(v, list) and v and all(isinstance(p, list) for p in v):
            pts = sorted((float(a), float(b)) for a, b in v)
            starts = t0 + dt * np.arange(n_cells)
            out = np.zeros(n_cells)
            for t_start, val in pts:
                out[starts >= t_start - 1e-9 * dt] = val
            return out
        if isinstance(v, list):
            if len(v) != n_cells:
                raise ScenarioError(f"explicit control list has {len(v)} cells, grid needs {n_cells}")
            return np.array(v, dtype=float)
        raise ScenarioError(f"unsupported control specification {v!r}")


@dataclass(frozen=True)
class ScheduleSpec:
    dt: float = 1.0
    u: ControlSpec = ControlSpec()
    h: ControlSpec = ControlSpec()
    h_feedback: str = "none"

    def build(self, params: ModelParams, horizon: float, t0: float = 0.0) -> ControlSchedule:
        """Concrete schedule with the delay windows forced to zero."""
        n = _n_steps(horizon, self.dt, "horizon", "schedule.dt")
        proto = ControlSchedule(t0, self.dt, np.zeros(n), np.zeros(n))
        frozen_u, frozen_h = proto.delay_masks(params)
        u = np.where(frozen_u, 0.0, self.u.build(n, self.dt, t0))
        h = np.where(frozen_h, 0.0, self.h.build(n, self.dt, t0))
        sched = proto.with_values(u, h)
        sched.validate(params)
        return sched


@dataclass(frozen=True)
class SweepSpec:
    """One-parameter sweep (``values`` or ``grid``) or a Latin-hypercube sample.

    With ``samples > 0`` the sweep is randomized over ``ranges`` (a mapping
    from parameter name to ``[lo, hi]``) and ``parameter``/``values`` are unused.
    """

    parameter: str = ""
    values: tuple = ()
    mode: str = "optimize"
    samples: int = 0
    ranges: tuple = ()
    correlate: tuple = ("J_T", "peak_i")

    def __post_init__(self):
        if self.mode not in ("simulate", "optimize"):
            raise ScenarioError(f"sweep.mode must be simulate or optimize, got {self.mode!r}")
        if self.samples:
            if self.samples < 3:
                raise ScenarioError("sweep.samples must be >= 3")
            if not self.ranges:
                raise ScenarioError("randomized sweep needs sweep.ranges")
            for name, lo, hi in self.ranges:
                if name not in SWEEP_PARAMETERS:
                    raise ScenarioError(f"cannot sweep {name!r}; choose from {SWEEP_PARAMETERS}")
                if not lo <= hi:
                    raise ScenarioError(f"sweep range for {name} has lo > hi")
        else:
            if self.parameter not in SWEEP_PARAMETERS:
                raise ScenarioError(
                    f"sweep.parameter must be one of {SWEEP_PARAMETERS}, got {self.parameter!r}")
            if not self.values:
                raise ScenarioError("sweep values are empty")

    @property
    def randomized(self) -> bool:
        return self.samples > 0


@dataclass(frozen=True)
class Scenario:
    model: ModelParams
    cost: CostParams
    initial: EpidemicState
    horizon: float
    dt: float
    mode: str
    schedule: ScheduleSpec | None
    solver: SolverConfig
    sweep: SweepSpec | None = None
    seed: int = 0
    kappa_ladder: tuple = (10.0, 100.0, 1000.0, 10000.0)
    horizon_ladder: tuple = (100.0, 200.0, 400.0)
    warm_start: bool = True
    arc_min_length: float = 1.0
    arc_state_tol: float = 1e-6
    shadow_fd_check: bool = False
    shadow_fd_step: float = 1e-3
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def with_overrides(self, dt: float | None = None, horizon: float | None = None) -> "Scenario":
        raw = dict(self.raw)
        if dt is not None:
            raw["dt"] = dt
        if horizon is not None:
            raw["horizon"] = horizon
        return build_scenario(raw)

    def control_schedule(self, params: ModelParams | None = None,
                         horizon: float | None = None) -> ControlSchedule:
        spec = self.schedule or ScheduleSpec(dt=self.solver.control_dt)
        return spec.build(params or self.model, self.horizon if horizon is None else horizon)


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str, source: str = "<string>") -> dict:
    """Parse the dotted ``key = value`` format into a flat dict."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ScenarioError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, val = stripped.partition("=")
        key, val = key.strip(), val.strip()
        if key not in KNOWN_KEYS:
            raise ScenarioError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ScenarioError(f"{source}:{lineno}: duplicate key {key!r}")
        if not val:
            raise ScenarioError(f"{source}:{lineno}: missing value for {key!r}")
        out[key] = _value(val)
    return out


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        # nested objects are sections, except where an object is itself a value
        if isinstance(v, dict) and key not in ("sweep.ranges",):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_json(text: str, source: str = "<string>") -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    flat = _flatten(obj)
    for key in flat:
        if key not in KNOWN_KEYS:
            raise ScenarioError(f"{source}: unknown key {key!r}")
    return flat


def _num(raw, key, default=None, kind=float):
    if key not in raw:
        if default is None:
            raise ScenarioError(f"missing required key {key!r}")
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{key} must be a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ScenarioError(f"{key} must be an integer, got {v!r}")
        return int(v)
    if not math.isfinite(v):
        raise ScenarioError(f"{key} must be finite")
    return float(v)


def _ladder(raw, key, default):
    if key not in raw:
        return default
    v = raw[key]
    if not isinstance(v, list) or not v or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ScenarioError(f"{key} must be a nonempty list of numbers")
    vals = tuple(float(x) for x in v)
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ScenarioError(f"{key} must be strictly increasing, got {list(vals)}")
    return vals


def _sweep(raw) -> SweepSpec | None:
    if not any(k.startswith("sweep.") for k in raw):
        return None
    values = ()
    if "sweep.values" in raw and "sweep.grid" in raw:
        raise ScenarioError("give either sweep.values or sweep.grid, not both")
    if "sweep.values" in raw:
        v = raw["sweep.values"]
        if not isinstance(v, list):
            raise ScenarioError("sweep.values must be a list")
        values = tuple(float(x) for x in v)
    elif "sweep.grid" in raw:
        g = raw["sweep.grid"]
        if not (isinstance(g, list) and len(g) == 3):
            raise ScenarioError("sweep.grid must be [lo, hi, count]")
        lo, hi, count = g
        if int(count) != count or count < 1:
            raise ScenarioError("sweep.grid count must be a positive integer")
        values = tuple(float(x) for x in np.linspace(lo, hi, int(count)))
    ranges = ()
    if "sweep.ranges" in raw:
        r = raw["sweep.ranges"]
        if not isinstance(r, dict):
            raise ScenarioError("sweep.ranges must be an object {name: [lo, hi]}")
        try:
            ranges = tuple((str(k), float(a), float(b)) for k, (a, b) in r.items())
        except (TypeError, ValueError):
            raise ScenarioError("sweep.ranges entries must be [lo, hi] pairs") from None
    corr = raw.get("sweep.correlate", ["J_T", "peak_i"])
    if not (isinstance(corr, list) and len(corr) == 2):
        raise ScenarioError("sweep.correlate must name two columns")
    return SweepSpec(
        parameter=str(raw.get("sweep.parameter", "")),
        values=values,
        mode=str(raw.get("sweep.mode", "optimize")),
        samples=_num(raw, "sweep.samples", 0, int),
        ranges=ranges,
        correlate=tuple(corr),
    )


def build_scenario(raw: dict) -> Scenario:
    """Validate a flat key dict and assemble a :class:`Scenario`."""
    for key in raw:
        if key not in KNOWN_KEYS:
            raise ScenarioError(f"unknown key {key!r}")
    mode = raw.get("mode", "simulate")
    if mode not in MODES:
        raise ScenarioError(f"mode must be one of {MODES}, got {mode!r}")
    try:
        model = ModelParams(**{k: _num(raw, f"model.{k}", d) for k, d in (
            ("beta", None), ("sigma", None), ("gamma", None), ("u_max", None),
            ("h_max", None), ("t_delay_u", 0.0), ("t_delay_h", 0.0), ("i_max", 0.1))})
        cost = CostParams(**{k: _num(raw, f"cost.{k}", getattr(CostParams, k))
                             for k in ("c_h", "c_nh", "c_v", "delta", "kappa")})
        initial = EpidemicState(*(_num(raw, f"initial.{k}") for k in ("s", "e", "i", "r")))
        horizon = _num(raw, "horizon")
        dt = _num(raw, "dt", 0.01)
        if not (horizon > 0 and dt > 0):
            raise ScenarioError("horizon and dt must be > 0")
        _n_steps(horizon, dt, "horizon", "dt")

        base = SolverConfig()
        solver_kw = {}
        for k in _SOLVER_KEYS:
            key = f"solver.{k}"
            if key not in raw:
                continue
            default = getattr(base, k)
            if isinstance(default, bool):
                if not isinstance(raw[key], bool):
                    raise ScenarioError(f"{key} must be true or false")
                solver_kw[k] = raw[key]
            elif isinstance(default, int):
                solver_kw[k] = _num(raw, key, kind=int)
            elif isinstance(default, float):
                solver_kw[k] = _num(raw, key)
            else:
                solver_kw[k] = str(raw[key])
        solver = SolverConfig(dt=dt, **solver_kw)

        schedule = None
        if any(k.startswith("schedule.") for k in raw):
            fb = str(raw.get("schedule.h_feedback", "none"))
            if fb not in H_FEEDBACKS:
                raise ScenarioError(f"schedule.h_feedback must be one of {H_FEEDBACKS}")
            schedule = ScheduleSpec(
                dt=_num(raw, "schedule.dt", solver.control_dt),
                u=ControlSpec(raw.get("schedule.u", 0.0)),
                h=ControlSpec(raw.get("schedule.h", 0.0)),
                h_feedback=fb,
            )
            _n_steps(schedule.dt, dt, "schedule.dt", "dt")
            schedule.build(model, horizon)
        warm = raw.get("continuation.warm_start", True)
        if not isinstance(warm, bool):
            raise ScenarioError("continuation.warm_start must be true or false")
        fd_check = raw.get("shadow.fd_check", False)
        if not isinstance(fd_check, bool):
            raise ScenarioError("shadow.fd_check must be true or false")
        sweep = _sweep(raw)
        if mode == "sweep" and sweep is None:
            raise ScenarioError("mode=sweep needs a sweep section")
        return Scenario(
            model=model, cost=cost, initial=initial, horizon=horizon, dt=dt, mode=mode,
            schedule=schedule, solver=solver, sweep=sweep,
            seed=_num(raw, "seed", 0, int),
            kappa_ladder=_ladder(raw, "continuation.kappa_ladder", Scenario.kappa_ladder),
            horizon_ladder=_ladder(raw, "continuation.horizon_ladder", Scenario.horizon_ladder),
            warm_start=warm,
            arc_min_length=_num(raw, "arcs.min_length", 1.0),
            arc_state_tol=_num(raw, "arcs.state_tol", 1e-6),
            shadow_fd_check=fd_check,
            shadow_fd_step=_num(raw, "shadow.fd_step", 1e-3),
            raw=dict(raw),
        )
    except ScenarioError:
        raise
    except EpiCtrlError as exc:
        raise ScenarioError(str(exc)) from exc


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
    raw = parse_json(text, str(path)) if path.suffix.lower() == ".json" else parse_text(text, str(path))
    return build_scenario(raw)
