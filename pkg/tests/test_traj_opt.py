import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liftgame import tag_env as te
from liftgame import traj_opt as to
from oracles import central_difference, qp_reference, rel_err

ENV = te.TagEnvSpec()
CONTROL = to.control_reference_spec(ENV)
GOAL = to.goal_reference_spec(ENV)
IDENT = to.identity_spec(ENV)


def instance(seed, spec=CONTROL, scale=1.5):
    rng = np.random.default_rng(seed)
    x1, _ = te.sample_initial_state(ENV, rng)
    cons = to.build_constraints(x1, spec, ENV)
    if spec.mode == "goal":
        xi = rng.uniform(-2, 2, 2)
    else:
        xi = rng.uniform(-scale, scale, spec.ref_dim)
    return x1, cons, xi


@pytest.mark.parametrize("spec", [CONTROL, GOAL], ids=["control", "goal"])
def test_matches_independent_qp_solver(spec):
    for seed in range(15):
        x1, cons, xi = instance(seed, spec)
        sol = to.solve_traj(xi, x1, spec, cons)
        ref, val = qp_reference(spec.G, spec.H, xi, cons.A_eq, cons.b_eq, cons.C, cons.lb, cons.ub)
        obj = 0.5 * np.sum((spec.G @ sol.tau - xi) ** 2) + 0.5 * np.sum((spec.H @ sol.tau) ** 2)
        assert obj <= val + 1e-7 * max(1.0, abs(val))
        np.testing.assert_allclose(sol.tau, ref, atol=1e-5)


def test_kkt_certificate():
    for seed in range(20):
        x1, cons, xi = instance(seed, scale=3.0)
        sol = to.solve_traj(xi, x1, CONTROL, cons)
        assert sol.kkt_residual <= 1e-8
        assert cons.violation(sol.tau) <= 1e-6
        g = cons.C @ sol.tau
        up, lo = sol.lam > 0, sol.lam < 0
        np.testing.assert_allclose(g[up], cons.ub[up], atol=1e-8)
        np.testing.assert_allclose(g[lo], cons.lb[lo], atol=1e-8)
        P = CONTROL.G.T @ CONTROL.G + CONTROL.H.T @ CONTROL.H
        r = P @ sol.tau - CONTROL.G.T @ xi + cons.A_eq.T @ sol.nu + cons.C.T @ sol.lam
        assert np.max(np.abs(r)) <= 1e-8


def test_feasible_reference_is_fixed_point_in_identity_mode():
    for seed in range(5):
        x1, cons, xi = instance(seed)
        feasible = to.solve_traj(xi, x1, CONTROL, cons).tau
        cons_i = to.build_constraints(x1, IDENT, ENV)
        proj = to.solve_traj(feasible, x1, IDENT, cons_i)
        np.testing.assert_allclose(proj.tau, feasible, atol=1e-8)
        assert not proj.lam.any()


def test_identity_projection_matches_oracle():
    rng = np.random.default_rng(11)
    x1, _ = te.sample_initial_state(ENV, rng)
    cons = to.build_constraints(x1, IDENT, ENV)
    xi = rng.normal(size=IDENT.ref_dim)
    sol = to.solve_traj(xi, x1, IDENT, cons)
    ref, _ = qp_reference(IDENT.G, IDENT.H, xi, cons.A_eq, cons.b_eq, cons.C, cons.lb, cons.ub)
    np.testing.assert_allclose(sol.tau, ref, atol=1e-5)


def test_infeasible_initial_state():
    with pytest.raises(to.InfeasibleError):
        to.build_constraints(np.array([5.0, 0.0, 0.0, 0.0]), CONTROL, ENV)
    with pytest.raises(to.InfeasibleError):
        to.build_constraints(np.array([0.0, 0.0, 5.0, 0.0]), CONTROL, ENV)
    with pytest.raises(ValueError):
        to.build_constraints(np.array([np.nan, 0.0, 0.0, 0.0]), CONTROL, ENV)


def test_bad_reference_dimension():
    x1, cons, _ = instance(0)
    with pytest.raises(ValueError):
        to.solve_traj(np.zeros(3), x1, CONTROL, cons)


def test_objective_must_be_strictly_convex():
    s = to.tag_constraint_structure(ENV)
    G = np.zeros((2, ENV.traj_dim))
    G[0, -1] = G[1, -2] = 1.0
    with pytest.raises(ValueError):
        to.TrajProblemSpec(G, np.zeros((1, ENV.traj_dim)), s)


def test_box_clip_and_derivative():
    spec = to.box_spec(-1.0, 1.0)
    cons = to.build_constraints(np.zeros(0), spec)
    inside = to.solve_traj(np.array([0.3]), None, spec, cons)
    assert inside.tau[0] == pytest.approx(0.3, abs=1e-12)
    assert to.traj_vjp(inside, spec, cons, np.array([1.0]))[0] == pytest.approx(1.0, abs=1e-12)
    outside = to.solve_traj(np.array([2.5]), None, spec, cons)
    assert outside.tau[0] == pytest.approx(1.0, abs=1e-12)
    assert outside.lam[0] == pytest.approx(1.5, abs=1e-12)
    assert to.traj_vjp(outside, spec, cons, np.array([1.0]))[0] == 0.0


def active_pattern(spec, cons, xi, x1):
    return to.solve_traj(xi, x1, spec, cons).active


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(12)
    checked = 0
    for seed in range(20):
        x1, cons, xi = instance(100 + seed, scale=2.0)
        sol = to.solve_traj(xi, x1, CONTROL, cons)
        gbar = rng.normal(size=len(sol.tau))
        h = 1e-6
        pattern = sol.active.copy()
        J = central_difference(lambda z: to.solve_traj(z, x1, CONTROL, cons).tau, xi, h)
        stable = all(np.array_equal(active_pattern(CONTROL, cons, xi + s * h * e, x1), pattern)
                     for e in np.eye(len(xi))[:6] for s in (-1, 1))
        if not stable or sol.weak.any():
            continue
        assert rel_err(to.traj_vjp(sol, CONTROL, cons, gbar), gbar @ J) < 1e-4
        checked += 1
    assert checked >= 10


def test_multiplier_cotangent_matches_finite_differences():
    rng = np.random.default_rng(13)
    for seed in range(30):
        x1, cons, xi = instance(200 + seed, scale=3.0)
        sol = to.solve_traj(xi, x1, CONTROL, cons)
        if not sol.strict.any() or sol.weak.any():
            continue
        lbar = rng.normal(size=len(sol.lam)) * (sol.lam != 0)
        J = central_difference(lambda z: to.solve_traj(z, x1, CONTROL, cons).lam, xi, 1e-6)
        assert rel_err(to.traj_vjp(sol, CONTROL, cons, None, lbar), lbar @ J) < 1e-4
        return
    pytest.skip("no instance with strictly active rows")


def test_sticky_penalty_gradient():
    for seed in range(40):
        x1, cons, xi = instance(300 + seed, scale=3.0)
        sol = to.solve_traj(xi, x1, CONTROL, cons)
        if not sol.strict.any() or sol.weak.any():
            continue
        val, grad = to.sticky_penalty(xi, cons, CONTROL, sol)
        assert val > 0
        fd = central_difference(lambda z: to.sticky_penalty(z, cons, CONTROL)[0], xi, 1e-6)
        assert rel_err(grad, fd) < 1e-4
        return
    pytest.skip("no instance with strictly active rows")


def test_sticky_penalty_identity_mode():
    x1, cons, xi = instance(5)
    feasible = to.solve_traj(xi, x1, CONTROL, cons).tau
    cons_i = to.build_constraints(x1, IDENT, ENV)
    val, grad = to.sticky_penalty(feasible, cons_i, IDENT)
    assert val == pytest.approx(0.0, abs=1e-14) and np.max(np.abs(grad)) < 1e-6
    bad = feasible + np.random.default_rng(0).normal(size=len(feasible))
    val, grad = to.sticky_penalty(bad, cons_i, IDENT)
    fd = central_difference(lambda z: to.sticky_penalty(z, cons_i, IDENT)[0], bad, 1e-6)
    assert val > 0 and rel_err(grad, fd) < 1e-5


def test_dual_active_set_agrees_with_main_path():
    ws, cfg = CONTROL._ws, CONTROL.config
    for seed in range(20):
        x1, cons, xi = instance(400 + seed, scale=3.0)
        sol = to.solve_traj(xi, x1, CONTROL, cons)
        s = cons.structure
        tau_p = ws.eq_pinv @ cons.b_eq
        c = ws.Z.T @ (ws.P @ tau_p - CONTROL.G.T @ xi)
        Ct = s.C[ws.rows] @ tau_p
        v, lam = to._dual_active_set(ws, cfg, c, s.lb[ws.rows] - Ct, s.ub[ws.rows] - Ct)
        np.testing.assert_allclose(tau_p + ws.Z @ v, sol.tau, atol=1e-9)
        np.testing.assert_allclose(lam, sol.lam[ws.rows], atol=1e-7)


def test_forced_fallback_gives_same_solution():
    cfg = dataclasses.replace(to.DEFAULT_CONFIG, admm_fallback_iter=1, polish_rounds=1)
    spec = to.control_reference_spec(ENV, cfg)
    for seed in range(10):
        x1, cons, xi = instance(500 + seed, scale=3.0)
        a = to.solve_traj(xi, x1, CONTROL, cons)
        b = to.solve_traj(xi, x1, spec, to.build_constraints(x1, spec, ENV))
        np.testing.assert_allclose(a.tau, b.tau, atol=1e-9)


def test_warm_start_guess():
    x1, cons, xi = instance(7, scale=3.0)
    a = to.solve_traj(xi, x1, CONTROL, cons)
    b = to.solve_traj(xi, x1, CONTROL, cons, guess=a.tau)
    np.testing.assert_allclose(a.tau, b.tau, atol=1e-10)
    assert b.iterations == 0


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.floats(0.1, 5.0))
def test_property_solution_feasible_and_optimal(seed, scale):
    x1, cons, xi = instance(seed, scale=scale)
    sol = to.solve_traj(xi, x1, CONTROL, cons)
    assert cons.violation(sol.tau) <= 1e-6
    assert sol.kkt_residual <= 1e-8


@settings(max_examples=15)
@given(st.integers(0, 10**6))
def test_property_projection_idempotent(seed):
    rng = np.random.default_rng(seed)
    x1, _ = te.sample_initial_state(ENV, rng)
    cons = to.build_constraints(x1, IDENT, ENV)
    once = to.solve_traj(rng.normal(size=IDENT.ref_dim), x1, IDENT, cons).tau
    twice = to.solve_traj(once, x1, IDENT, cons).tau
    np.testing.assert_allclose(once, twice, atol=1e-7)
