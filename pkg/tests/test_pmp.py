import math

import numpy as np
import pytest

from epi_ctrl.analysis import boundary_maintenance_control
from epi_ctrl.cost import CostParams, evaluate_cost, penalty_psi
from epi_ctrl.errors import BoundViolationError, ParameterError
from epi_ctrl.pmp import (AdjointState, SolverConfig, adjoint_rhs, cell_gradients, cell_peaks,
                          classify, control_from_switching, detect_arcs, detect_singular_arcs,
                          forward_backward_sweep, gradient_check, integrate_adjoint,
                          switching_arrays, switching_functions)
from epi_ctrl.seir import ControlSchedule, EpidemicState, integrate, integrate_feedback

from conftest import BASE_KAPPA, BASE_PARAMS, BASE_X0

CP = CostParams(kappa=BASE_KAPPA)


def hamiltonian(t, x, lam, u, h, p, cp):
    s, e, i = x[:3]
    b = p.beta - h
    f = np.array([-b * s * i - u * s, b * s * i - p.sigma * e, p.sigma * e - p.gamma * i])
    l0 = cp.c_h * i * h + cp.c_nh * i + cp.c_v * u * s + cp.kappa * penalty_psi(i, p.i_max)
    return math.exp(-cp.delta * t) * l0 + float(np.dot(lam, f))


class TestAdjointRhs:
    def test_only_infection_cost_survives(self):
        st = EpidemicState(0.9, 0.05, 0.05, 0.0)
        d = adjoint_rhs(0.0, AdjointState(0, 0, 0), st, 0.0, 0.0, BASE_PARAMS,
                        CostParams(c_h=1, c_nh=1, c_v=0.5, kappa=0))
        np.testing.assert_allclose(d, [0.0, 0.0, -1.0], atol=1e-15)

    def test_lambda_e_fixed_direction(self):
        d = adjoint_rhs(3.0, AdjointState(1.0, 2.5, 2.5), BASE_X0, 0.05, 0.2, BASE_PARAMS, CP)
        assert d[1] == 0.0

    def test_penalty_barrier_term(self):
        st = EpidemicState(0.6, 0.25, 0.15, 0.0)
        cp = CostParams(c_h=0, c_nh=0, c_v=0, kappa=100)
        d = adjoint_rhs(0.0, AdjointState(0, 0, 0), st, 0.0, 0.0, BASE_PARAMS, cp)
        assert d[2] == pytest.approx(-10.0, abs=1e-12)

    def test_equals_minus_state_gradient_of_hamiltonian(self, rng):
        # DERIVED: central differences of the Hamiltonian in (s, e, i)
        for _ in range(20):
            x = rng.dirichlet([2, 1, 1, 1])
            x[2] = rng.uniform(0.0, 0.3)
            lam = rng.normal(0, 5, 3)
            t, u, h = rng.uniform(0, 100), rng.uniform(0, 0.05), rng.uniform(0, 0.2)
            d = adjoint_rhs(t, AdjointState(*lam), EpidemicState.from_array(x / x.sum(), tol=1),
                            u, h, BASE_PARAMS, CP)
            x = x / x.sum()
            grad = []
            for k in range(3):
                dx = np.zeros(4)
                dx[k] = 1e-6
                grad.append((hamiltonian(t, x + dx, lam, u, h, BASE_PARAMS, CP)
                             - hamiltonian(t, x - dx, lam, u, h, BASE_PARAMS, CP)) / 2e-6)
            np.testing.assert_allclose(d, -np.array(grad), rtol=1e-6, atol=1e-7)


class TestIntegrateAdjoint:
    def _run(self, cp, T=50.0):
        sched = ControlSchedule.constant(BASE_PARAMS, T, 1.0, 0.05, 0.2)
        tr = integrate(BASE_X0, sched, BASE_PARAMS, T)
        return integrate_adjoint(tr, sched, BASE_PARAMS, cp)

    def test_zero_costs_give_zero_costates(self):
        adj = self._run(CostParams(0, 0, 0, 0.05, 0))
        assert np.all(adj.values == 0)

    def test_transversality(self):
        adj = self._run(CP)
        assert adj[len(adj.times) - 1] == AdjointState(0.0, 0.0, 0.0)

    def test_short_interval_expansion(self):
        x = EpidemicState(0.9, 0.0, 0.0, 0.1)
        T, eps, delta = 10.0, 0.01, 0.05
        sched = ControlSchedule(T - eps, eps, [0.0], [0.0])
        tr = integrate(x, sched, BASE_PARAMS, eps, dt=eps)
        adj = integrate_adjoint(tr, sched, BASE_PARAMS, CostParams(0, 1, 0, delta, 0))
        assert adj.lambda_i[0] == pytest.approx(eps * math.exp(-delta * T), rel=1e-3)

    def test_schedule_mismatch(self):
        sched = ControlSchedule.constant(BASE_PARAMS, 10, 1.0, 0.05, 0.2)
        tr = integrate(BASE_X0, sched, BASE_PARAMS, 10.0)
        other = ControlSchedule.constant(BASE_PARAMS, 10, 1.0, 0.0, 0.2)
        with pytest.raises(ParameterError):
            integrate_adjoint(tr, other, BASE_PARAMS, CP)


class TestSwitching:
    def test_zero_costates(self):
        cp = CostParams(c_h=2.0, c_v=0.5)
        pu, ph = switching_functions(BASE_X0, AdjointState(0, 0, 0), 0.0, cp)
        assert pu == pytest.approx(0.9 * 0.5) and ph == pytest.approx(0.05 * 2.0)

    def test_singular_candidate(self):
        cp = CostParams()
        lam_s = cp.c_v * math.exp(-cp.delta * 7.0)
        pu, _ = switching_functions(BASE_X0, AdjointState(lam_s, 3, 1), 7.0, cp)
        assert pu == pytest.approx(0.0, abs=1e-16)

    def test_no_prevalence(self):
        _, ph = switching_functions(EpidemicState(0.9, 0.1, 0, 0), AdjointState(5, -3, 2), 1.0, CP)
        assert ph == 0

    def test_arrays_match_scalar(self, baseline_result):
        r = baseline_result
        for k in (0, 500, 10000, 20000):
            pu, ph = switching_functions(EpidemicState.from_array(r.trajectory.states[k], tol=1e-8),
                                         r.adjoints[k], r.trajectory.times[k], CP)
            assert r.switching.phi_u[k] == pytest.approx(pu, rel=1e-12, abs=1e-300)
            assert r.switching.phi_h[k] == pytest.approx(ph, rel=1e-12, abs=1e-300)

    def test_classify(self):
        out = classify(np.array([-1.0, 0.0, 1e-9, 1.0]), 1e-8)
        assert out.tolist() == ["at-max", "singular", "singular", "at-min"]

    def test_cell_peaks(self):
        phi = np.array([0.0, -1.0, 0.5, 2.0, -0.1])
        assert cell_peaks(phi, 2).tolist() == [1.0, 2.0]


class TestControlFromSwitching:
    cfg = SolverConfig()

    def test_bang_bang(self):
        assert control_from_switching(-1, 1, 5.0, BASE_PARAMS, self.cfg, BASE_X0) == (0.05, 0.0)
        assert control_from_switching(1, -1, 5.0, BASE_PARAMS, self.cfg, BASE_X0) == (0.0, 0.2)

    def test_delay_dominates(self):
        p = BASE_PARAMS.replace(t_delay_u=10.0, t_delay_h=2.0)
        assert control_from_switching(-1, -1, 5.0, p, self.cfg, BASE_X0) == (0.0, 0.2)
        assert control_from_switching(-1, -1, 1.0, p, self.cfg, BASE_X0) == (0.0, 0.0)

    def test_midpoint(self):
        assert control_from_switching(0.0, 1e-10, 0.0, BASE_PARAMS, self.cfg, BASE_X0) == (0.025, 0.1)

    def test_boundary_feedback(self):
        cfg = SolverConfig(singular_policy="boundary-feedback")
        st = EpidemicState(0.25, 0.05, 0.1, 0.6)
        u, h = control_from_switching(-1, 0.0, 0.0, BASE_PARAMS, cfg, st)
        assert u == 0.05 and h == pytest.approx(0.1, abs=1e-15)

    def test_bad_policy(self):
        with pytest.raises(ParameterError):
            SolverConfig(singular_policy="whatever")
        with pytest.raises(ParameterError):
            SolverConfig(damping=0)


class TestSweep:
    def test_zero_cost_problem(self):
        init = ControlSchedule.constant(BASE_PARAMS, 50, 1.0, 0.05, 0.2)
        r = forward_backward_sweep(BASE_X0, init, BASE_PARAMS, CostParams(0, 0, 0, 0.05, 0), 50.0)
        assert r.converged and r.iterations == 1
        assert np.all(r.schedule.u_values == 0) and np.all(r.schedule.h_values == 0)

    def test_dominated_vaccination(self):
        cp = CostParams(c_h=0, c_nh=0, c_v=1e6, kappa=0)
        init = ControlSchedule.constant(BASE_PARAMS, 60, 1.0, 0.05, 0.0)
        r = forward_backward_sweep(BASE_X0, init, BASE_PARAMS, cp, 60.0)
        assert r.converged and np.all(r.schedule.u_values == 0)

    def test_baseline_shape(self, baseline_result):
        r = baseline_result
        assert r.converged
        u, h = r.schedule.u_values, r.schedule.h_values
        assert u[0] == 0.05 and np.all(u[:30] == 0.05)
        assert h[0] == 0.2
        first_drop = int(np.argmax(h < 0.2))
        assert first_drop > 0 and np.all(h[first_drop:first_drop + 20] == 0)

    def test_convergence_record(self, baseline_result):
        r = baseline_result
        assert r.control_residual_history[-1] <= r.config.conv_tol
        assert len(r.control_residual_history) == r.iterations
        assert r.kkt_residual <= 1e-6

    def test_beats_reference_schedules(self, baseline_result):
        for u, h in ((0.0, 0.0), (0.05, 0.2)):
            sched = ControlSchedule.constant(BASE_PARAMS, 200, 1.0, u, h)
            tr = integrate(BASE_X0, sched, BASE_PARAMS, 200.0)
            assert baseline_result.cost.total <= evaluate_cost(tr, CP, 0.1).total

    def test_non_deterioration_from_warm_start(self, baseline_result):
        r = forward_backward_sweep(BASE_X0, baseline_result.schedule, BASE_PARAMS, CP, 200.0)
        assert r.converged
        assert r.cost.total <= r.initial_cost.total + 1e-9

    def test_pointwise_minimality(self, baseline_result):
        r = baseline_result
        m = 100
        band = r.sing_band
        for phi, v, hi in ((r.switching.phi_u, r.schedule.u_values, 0.05),
                           (r.switching.phi_h, r.schedule.h_values, 0.2)):
            for c in range(r.schedule.n_cells):
                seg = phi[c * m:(c + 1) * m + 1]
                if np.all(seg < -band):
                    assert v[c] == hi
                elif np.all(seg > band):
                    assert v[c] == 0.0

    def test_max_iters_zero(self):
        r = forward_backward_sweep(BASE_X0, None, BASE_PARAMS, CP, 50.0, SolverConfig(max_iters=0))
        assert not r.converged and r.iterations == 0
        assert r.cost == r.initial_cost

    def test_records_initial_guess(self):
        init = ControlSchedule.constant(BASE_PARAMS, 50, 1.0, 0.01, 0.1)
        r = forward_backward_sweep(BASE_X0, init, BASE_PARAMS, CP, 50.0)
        assert r.initial_schedule is init

    def test_delays_respected(self):
        p = BASE_PARAMS.replace(t_delay_u=15.0, t_delay_h=5.0)
        r = forward_backward_sweep(BASE_X0, None, p, CP, 100.0)
        assert r.converged
        assert np.all(r.schedule.u_values[:15] == 0) and np.all(r.schedule.h_values[:5] == 0)
        assert r.schedule.u_values[15] == 0.05

    def test_plain_damping_mode(self):
        cfg = SolverConfig(adaptive=False, max_iters=50)
        r = forward_backward_sweep(BASE_X0, None, BASE_PARAMS, CP, 100.0, cfg)
        assert len(r.control_residual_history) == r.iterations
        assert np.all(np.isfinite(r.schedule.u_values))

    def test_boundary_feedback_policy_converges(self):
        cfg = SolverConfig(singular_policy="boundary-feedback")
        r = forward_backward_sweep(BASE_X0, None, BASE_PARAMS, CP, 100.0, cfg)
        assert r.converged

    def test_rejects_inadmissible_init(self):
        bad = ControlSchedule.constant(BASE_PARAMS, 50, 1.0, 0.2, 0.0)
        with pytest.raises(ParameterError):
            forward_backward_sweep(BASE_X0, bad, BASE_PARAMS, CP, 50.0)

    def test_rejects_grid_mismatch(self):
        init = ControlSchedule.constant(BASE_PARAMS, 40, 1.0)
        with pytest.raises(ParameterError):
            forward_backward_sweep(BASE_X0, init, BASE_PARAMS, CP, 50.0)


class TestGradientCheck:
    def _interior(self, rng, n=200):
        return ControlSchedule(0.0, 1.0, rng.uniform(0.005, 0.045, n), rng.uniform(0.02, 0.18, n))

    def test_zero_cost(self, rng):
        g = gradient_check(BASE_X0, self._interior(rng, 20), BASE_PARAMS, CostParams(0, 0, 0, 0.05, 0),
                           20.0, 3, "u")
        assert g.adjoint_gradient == 0 and g.fd_gradient == 0

    def test_random_cells(self, rng):
        # DERIVED: central differences of the discrete cost
        sched = self._interior(rng)
        for c in rng.choice(200, 8, replace=False):
            for kind in ("u", "h"):
                g = gradient_check(BASE_X0, sched, BASE_PARAMS, CP, 200.0, int(c), kind)
                assert abs(g.adjoint_gradient - g.fd_gradient) <= 1e-4 * max(1e-6, abs(g.fd_gradient))

    def test_frozen_by_delay(self, rng):
        p = BASE_PARAMS.replace(t_delay_u=10.0)
        s = self._interior(rng, 20)
        sched = s.with_values(np.where(np.arange(20) < 10, 0.0, s.u_values), s.h_values)
        g = gradient_check(BASE_X0, sched, p, CP, 20.0, 4, "u")
        assert g.frozen and g.adjoint_gradient == 0 and g.fd_gradient == 0

    def test_bound_violation(self):
        sched = ControlSchedule.constant(BASE_PARAMS, 20, 1.0, 0.05, 0.1)
        with pytest.raises(BoundViolationError):
            gradient_check(BASE_X0, sched, BASE_PARAMS, CP, 20.0, 2, "u")


def pinned_trajectory(T):
    p = BASE_PARAMS
    e0 = p.gamma * p.i_max / p.sigma
    x0 = EpidemicState(0.3, e0, p.i_max, 1 - 0.3 - e0 - p.i_max)
    return integrate_feedback(
        x0, lambda t, x: (0.0, boundary_maintenance_control(x[0], p)[0]), p, T)


class TestArcs:
    def test_bang_bang_has_no_arcs(self):
        tr = pinned_trajectory(5.0)
        n = len(tr.times)
        arcs = detect_arcs(tr.__class__(tr.times, tr.states * 0 + [0.8, 0.1, 0.05, 0.05],
                                        tr.controls, tr.dt),
                           BASE_PARAMS, 1.0, np.full(n, -1.0), np.full(n, 1.0), band=1e-8)
        assert arcs == []

    def test_boundary_arc_constructed(self):
        tr = pinned_trajectory(9.5)
        arcs = detect_arcs(tr, BASE_PARAMS, 1.0)
        assert len(arcs) == 1
        arc = arcs[0]
        assert arc.kind == "boundary-maintenance" and arc.verified
        assert arc.residual <= 1e-6
        assert arc.start == 0.0 and arc.end == pytest.approx(9.5)

    def test_min_length_longer_than_horizon(self, baseline_result):
        assert detect_singular_arcs(baseline_result, 1000.0) == []

    def test_singular_arcs_are_in_band(self, baseline_result):
        r = baseline_result
        for arc in detect_singular_arcs(r, 1.0):
            if arc.kind == "boundary-maintenance":
                continue
            phi = r.switching.phi_h if arc.kind == "singular-h" else r.switching.phi_u
            mask = (r.trajectory.times >= arc.start) & (r.trajectory.times <= arc.end)
            assert np.all(np.abs(phi[mask]) <= r.sing_band)


def test_cell_gradients_of_constant_phi():
    sched = ControlSchedule.constant(BASE_PARAMS, 4, 1.0)
    tr = integrate(BASE_X0, sched, BASE_PARAMS, 4.0, dt=0.25)
    gu, gh = cell_gradients(tr, np.full(17, 2.0), np.arange(17) * 0.25, sched)
    np.testing.assert_allclose(gu, 2.0)
    np.testing.assert_allclose(gh, [0.5, 1.5, 2.5, 3.5])
