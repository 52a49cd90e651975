"""``epi-ctrl`` command-line front end.

Exit codes: 0 success, 2 invalid input, 3 non-convergence, 4 runtime or
numerical failure.  Set ``EPI_CTRL_LOG`` (e.g. ``DEBUG``) for verbose logs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, continuation, sensitivity
from .cost import evaluate_cost
from .errors import EpiCtrlError, ParameterError, ScenarioError
from .pmp import OptimizationResult, detect_arcs, detect_singular_arcs, forward_backward_sweep
from .scenario import MODES, Scenario, parse_scenario
from .seir import ControlSchedule, Trajectory, integrate, integrate_feedback

log = logging.getLogger("epi_ctrl")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_FAILURE = 0, 2, 3, 4
TRAJECTORY_COLUMNS = ("t", "s", "e", "i", "r", "u", "h",
                      "lambda_s", "lambda_e", "lambda_i", "phi_u", "phi_h")
SWEEP_COLUMNS = ("index", "J_T", "peak_i", "final_size", "max_violation", "converged", "error")


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, tuples and arrays become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _fmt(x) -> str:
    return repr(float(x))


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def write_trajectory(path: Path, traj: Trajectory, result: OptimizationResult | None = None,
                     every: int = 1) -> None:
    idx = range(0, len(traj.times), every)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for k in idx:
            row = [_fmt(traj.times[k]), *map(_fmt, traj.states[k]), *map(_fmt, traj.controls[k])]
            if result is not None:
                row += [*map(_fmt, result.adjoints.values[k]),
                        _fmt(result.switching.phi_u[k]), _fmt(result.switching.phi_h[k])]
            else:
                row += [""] * 5
            w.writerow(row)


def write_sweep(path: Path, rows) -> None:
    names = sorted({n for r in rows for n in r.values})
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", *names, *SWEEP_COLUMNS[1:]])
        for r in rows:
            w.writerow([r.index, *(_fmt(r.values[n]) for n in names),
                        *(_fmt(getattr(r, c)) for c in ("J_T", "peak_i", "final_size", "max_violation")),
                        str(r.converged).lower(), r.error])


def scenario_echo(sc: Scenario) -> dict:
    return {
        "mode": sc.mode,
        "seed": sc.seed,
        "horizon": sc.horizon,
        "dt": sc.dt,
        "model": dataclasses.asdict(sc.model),
        "cost": dataclasses.asdict(sc.cost),
        "initial": {k: getattr(sc.initial, k) for k in ("s", "e", "i", "r")},
        "solver": dataclasses.asdict(sc.solver),
        "schedule": None if sc.schedule is None else {
            "dt": sc.schedule.dt, "u": sc.schedule.u.value, "h": sc.schedule.h.value,
            "h_feedback": sc.schedule.h_feedback},
        "continuation": {"kappa_ladder": sc.kappa_ladder, "horizon_ladder": sc.horizon_ladder,
                         "warm_start": sc.warm_start},
        "sweep": None if sc.sweep is None else {
            "parameter": sc.sweep.parameter, "values": sc.sweep.values, "mode": sc.sweep.mode,
            "samples": sc.sweep.samples,
            "ranges": {n: [lo, hi] for n, lo, hi in sc.sweep.ranges},
            "correlate": sc.sweep.correlate},
        "arcs": {"min_length": sc.arc_min_length, "state_tol": sc.arc_state_tol},
        "shadow": {"fd_check": sc.shadow_fd_check, "fd_step": sc.shadow_fd_step},
    }


def _arcs(arcs) -> list[dict]:
    return [{"start": a.start, "end": a.end, "kind": a.kind, "residual": a.residual,
             "verified": a.verified} for a in arcs]


def _traj_summary(traj: Trajectory) -> dict:
    return {"peak_i": traj.peak_i, "peak_time": traj.peak_time,
            "final_size": float(1.0 - traj.s[-1]), "final_state": traj.states[-1]}


def _simulate(sc: Scenario, out: Path, every: int) -> int:
    sched = sc.control_schedule()
    if sc.schedule is not None and sc.schedule.h_feedback == "boundary-maintenance":
        p = sc.model

        def policy(t, x):
            k = min(int((t - sched.t0) / sched.dt + 1e-9), sched.n_cells - 1)
            return float(sched.u_values[k]), analysis.boundary_maintenance_control(max(x[0], 1e-300), p)[0]

        traj = integrate_feedback(sc.initial, policy, p, sc.horizon, sc.dt)
    else:
        traj = integrate(sc.initial, sched, sc.model, sc.horizon, sc.dt)
    br = evaluate_cost(traj, sc.cost, sc.model.i_max, sc.model)
    write_trajectory(out / "trajectory.csv", traj, every=every)
    arcs = detect_arcs(traj, sc.model, sc.arc_min_length, state_tol=sc.arc_state_tol)
    write_json(out / "summary.json", {
        "status": "ok", "scenario": scenario_echo(sc), "cost": br.as_dict(),
        **_traj_summary(traj), "arcs": _arcs(arcs)})
    return EXIT_OK


def _result_summary(res: OptimizationResult) -> dict:
    return {
        "converged": res.converged, "iterations": res.iterations,
        "kkt_residual": res.kkt_residual, "singular_band": res.sing_band,
        "cost": res.cost.as_dict(), "initial_cost": res.initial_cost.as_dict(),
        "control_residual_history": res.control_residual_history,
        **_traj_summary(res.trajectory),
        "lambda_i0": float(res.adjoints.lambda_i[0]),
        "controls": {"dt": res.schedule.dt, "u": res.schedule.u_values, "h": res.schedule.h_values},
    }


def _optimize(sc: Scenario, out: Path, every: int) -> int:
    init = sc.control_schedule() if sc.schedule is not None else None
    res = forward_backward_sweep(sc.initial, init, sc.model, sc.cost, sc.horizon, sc.solver)
    write_trajectory(out / "trajectory.csv", res.trajectory, res, every)
    summary = {"status": "ok" if res.converged else "not-converged",
               "scenario": scenario_echo(sc), **_result_summary(res),
               "arcs": _arcs(detect_singular_arcs(res, sc.arc_min_length, sc.arc_state_tol))}
    if res.converged:
        summary["shadow_values"] = {w: sensitivity.capacity_shadow_value(res, w)
                                    for w in ("u_max", "h_max")}
        if sc.shadow_fd_check:
            summary["envelope_check"] = {}
            for w in ("u_max", "h_max"):
                chk = sensitivity.envelope_check(res, sc.initial, w, sc.shadow_fd_step)
                summary["envelope_check"][w] = {
                    "multiplier": chk.multiplier, "finite_difference": chk.finite_difference,
                    "relative_gap": chk.relative_gap, "bumped_converged": chk.bumped_converged}
    write_json(out / "summary.json", summary)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _continuation(sc: Scenario, out: Path, every: int) -> int:
    if sc.mode == "kappa-continuation":
        rep = continuation.kappa_continuation(sc.initial, sc.model, sc.cost, sc.horizon,
                                              sc.kappa_ladder, sc.solver, sc.warm_start)
    else:
        rep = continuation.horizon_continuation(sc.initial, sc.model, sc.cost, sc.horizon_ladder,
                                                sc.solver, sc.warm_start)
    last = rep.results[-1]
    write_trajectory(out / "trajectory.csv", last.trajectory, last, every)
    ok = all(r.converged for r in rep.ladder)
    summary = {"status": "ok" if ok else "not-converged", "scenario": scenario_echo(sc),
               "warm_started": rep.warm_started,
               "ladder": [dataclasses.asdict(r) for r in rep.ladder],
               "final_rung": _result_summary(last)}
    if sc.mode == "horizon-continuation":
        summary["gaps_within_tail_bound"] = rep.flagged_converged
    write_json(out / "summary.json", summary)
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def _sweep(sc: Scenario, out: Path, every: int) -> int:
    rows = sensitivity.run_sweep(sc.sweep, sc)
    write_sweep(out / "sweep.csv", rows)
    summary = {"status": "ok", "scenario": scenario_echo(sc), "rows": len(rows),
               "failed_rows": sum(1 for r in rows if r.error),
               "non_converged_rows": sum(1 for r in rows if not r.error and not r.converged)}
    x, y = sc.sweep.correlate
    try:
        summary["correlation"] = {"x": x, "y": y,
                                  "pearson": sensitivity.row_correlation(rows, x, y)}
    except (EpiCtrlError, AttributeError, KeyError) as exc:
        summary["correlation"] = {"x": x, "y": y, "pearson": None, "error": str(exc)}
    write_json(out / "summary.json", summary)
    return EXIT_OK


def _final_size(sc: Scenario, out: Path, every: int) -> int:
    p = sc.model
    fs = analysis.final_size_max_suppression(sc.initial, p)
    sched = ControlSchedule.constant(p.replace(t_delay_u=0.0, t_delay_h=0.0), sc.horizon,
                                     sc.solver.control_dt, 0.0, p.h_max)
    traj = integrate(sc.initial, sched, p.replace(t_delay_u=0.0, t_delay_h=0.0), sc.horizon, sc.dt)
    s_sim = float(traj.s[-1])
    write_trajectory(out / "trajectory.csv", traj, every=every)
    write_json(out / "summary.json", {
        "status": "ok", "scenario": scenario_echo(sc),
        "s_inf_lambert": fs.s_inf, "s_inf_simulated": s_sim,
        "relative_gap": abs(s_sim - fs.s_inf) / fs.s_inf,
        "final_size": fs.final_size, "implicit_residual": fs.implicit_residual,
        "i_at_horizon": float(traj.i[-1])})
    return EXIT_OK


_DISPATCH = {"simulate": _simulate, "optimize": _optimize,
             "kappa-continuation": _continuation, "horizon-continuation": _continuation,
             "sweep": _sweep, "final-size": _final_size}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epi-ctrl", description=__doc__.splitlines()[0])
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--scenario", required=True, type=Path, help="scenario file (.txt/.cfg or .json)")
    ap.add_argument("--out", required=True, type=Path, help="output directory")
    ap.add_argument("--seed", type=int, help="override the scenario seed")
    ap.add_argument("--dt", type=float, help="override the integration step")
    ap.add_argument("--horizon", type=float, help="override the horizon")
    ap.add_argument("--every", type=int, default=1,
                    help="write every N-th sample to trajectory.csv (default 1)")
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ScenarioError, ParameterError)):
        return EXIT_INVALID
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("EPI_CTRL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc), "exit_code": EXIT_FAILURE}),
              file=sys.stderr)
        return EXIT_FAILURE
    try:
        if args.every < 1:
            raise ParameterError("--every must be >= 1")
        sc = parse_scenario(args.scenario)
        if args.dt is not None or args.horizon is not None:
            sc = sc.with_overrides(dt=args.dt, horizon=args.horizon)
        changes = {"mode": args.mode}
        if args.seed is not None:
            changes["seed"] = args.seed
        sc = dataclasses.replace(sc, **changes)
        if sc.mode == "sweep" and sc.sweep is None:
            raise ScenarioError("sweep mode needs sweep.parameter with values, or sweep.samples")
        code = _DISPATCH[sc.mode](sc, out, args.every)
    except Exception as exc:  # every failure becomes a machine-readable record
        code = _exit_code(exc)
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        log.debug("pipeline failure", exc_info=True)
        write_json(out / "error.json", payload)
        print(json.dumps(payload), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
