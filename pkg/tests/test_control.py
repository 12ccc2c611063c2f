import numpy as np
import pytest
from conftest import make_problem

from cell import constants, override_coefficients
from control import (
    continuous_adjoint_gap,
    control_field,
    cost_from_state,
    energy_identity_check,
    evaluate_cost,
    evaluate_cost_kappa,
    gradient_check,
    kappa_sweep,
    optimality_residual,
    optimize_gradient,
    reduced_gradient,
    solve_coupled_fixed_point,
    target_identity_check,
)
from domain import (
    box_mask,
    build_mesh,
    build_problem,
    build_time_axis,
    grad_squared_slice,
    inner_control,
    l2_control,
    l2_slice,
    l2_spacetime,
    sample_function,
    zero_field,
)
from helpers import make_preset, observed_orders, sine_product
from memory import apply_H
from solvers import solve_state


def _random_control(problem, seed):
    rng = np.random.default_rng(seed)
    return control_field(problem, zero_field(problem.mesh, problem.time).with_values(rng.standard_normal((problem.time.M + 1, problem.mesh.n_interior))))


def test_zero_problem_costs_nothing(zero_problem):
    cost = evaluate_cost(zero_problem, zero_field(zero_problem.mesh, zero_problem.time))
    assert cost.as_dict() == {
        "term_grad": 0.0,
        "term_final": 0.0,
        "term_control": 0.0,
        "term_strange_final": 0.0,
        "term_strange_rate": 0.0,
        "total": 0.0,
        "kappa": 1.0,
    }


def test_cost_with_unreachable_target(problem_1d, coeffs3):
    mesh, time = problem_1d.mesh, problem_1d.time
    cost = evaluate_cost(problem_1d, zero_field(mesh, time))
    target = problem_1d.u_T
    weights = time.trapezoid_weights()
    expected_grad = 0.5 * sum(w * grad_squared_slice(mesh, row) for w, row in zip(weights, target.values))
    assert cost.term_grad == pytest.approx(expected_grad, rel=1e-13)
    assert cost.term_final == pytest.approx(0.5 * l2_slice(target, -1) ** 2, rel=1e-13)
    assert cost.term_strange_final == pytest.approx(0.5 * coeffs3.strange_weight * l2_slice(target, -1) ** 2, rel=1e-13)
    assert cost.term_control == 0.0
    assert cost.term_strange_rate == 0.0
    parts = cost.term_grad + cost.term_final + cost.term_control + cost.term_strange_final + cost.term_strange_rate
    assert cost.total == pytest.approx(parts, rel=1e-15)


def test_kappa_scaling(problem_1d):
    v = _random_control(problem_1d, 4)
    plain = evaluate_cost(problem_1d, v)
    assert evaluate_cost_kappa(problem_1d, v, 1.0).total == plain.total
    doubled = evaluate_cost_kappa(problem_1d, v, 2.0)
    assert doubled.total - doubled.term_control == pytest.approx(2.0 * (plain.total - plain.term_control), rel=1e-13)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            evaluate_cost_kappa(problem_1d, v, bad)


def test_strange_rate_matches_energy_split():
    problem = make_problem(M=40)
    v = control_field(problem, sample_function(problem.mesh, problem.time, lambda x, t: sine_product(x) * (1.0 + t)))
    u, Hu, _ = solve_state(problem, v)
    coeffs = problem.coeffs
    cost = cost_from_state(problem, v, u, Hu)
    lhs = cost.term_strange_rate + 0.5 * coeffs.A * coeffs.B * l2_slice(Hu, -1) ** 2
    rhs = 0.5 * coeffs.A * (l2_spacetime(u) ** 2 - coeffs.B**2 * l2_spacetime(Hu) ** 2)
    assert lhs == pytest.approx(rhs, rel=0.1)


def test_zero_data_gradient_is_zero(zero_problem):
    g, u, p = reduced_gradient(zero_problem, zero_field(zero_problem.mesh, zero_problem.time))
    assert np.all(g.values == 0.0) and np.all(u.values == 0.0) and np.all(p.values == 0.0)


@pytest.mark.parametrize("kappa", [1.0, 7.5])
def test_gradient_is_exact_directional_derivative(kappa):
    # J is quadratic, so the central difference is exact up to round-off
    problem_1d = make_problem(method="direct")
    v = _random_control(problem_1d, 1)
    w = _random_control(problem_1d, 2)
    g, _, _ = reduced_gradient(problem_1d, v, kappa)
    lam = 1e-3
    plus = evaluate_cost_kappa(problem_1d, v + w * lam, kappa).total
    minus = evaluate_cost_kappa(problem_1d, v - w * lam, kappa).total
    central = (plus - minus) / (2.0 * lam)
    predicted = inner_control(g, w)
    assert central == pytest.approx(predicted, rel=1e-6)


def test_gradient_lives_on_control_region(problem_1d):
    g, _, _ = reduced_gradient(problem_1d, _random_control(problem_1d, 3))
    outside = ~problem_1d.omega.indicator
    assert np.all(g.values[:, outside] == 0.0)
    assert np.all(g.values[0] == 0.0)


def test_gradient_check_error_shrinks_with_lambda():
    problem_1d = make_problem(method="direct")
    v = _random_control(problem_1d, 5)
    g, _, _ = reduced_gradient(problem_1d, v)
    rows = gradient_check(problem_1d, v, g, lambdas=[1e-2, 1e-3, 1e-4])
    errors = [row["relative_error"] for row in rows]
    assert errors[0] > errors[1] > errors[2]
    assert errors[-1] < 0.02 * errors[0]


def test_fixed_point_on_zero_data(zero_problem):
    u, p, v, report = solve_coupled_fixed_point(zero_problem)
    assert report.converged and report.iterations == 1
    assert np.all(v.values == 0.0)


def test_fixed_point_rejects_bad_arguments(problem_1d):
    with pytest.raises(ValueError):
        solve_coupled_fixed_point(problem_1d, relax=0.0)
    with pytest.raises(ValueError):
        solve_coupled_fixed_point(problem_1d, relax=1.5)
    with pytest.raises(ValueError):
        optimize_gradient(problem_1d, step_rule="newton")


def test_optimize_on_zero_data(zero_problem):
    v, report = optimize_gradient(zero_problem)
    assert report.converged and report.iterations == 0
    assert np.all(v.values == 0.0)


@pytest.fixture(scope="module")
def smoke_2d():
    return make_problem(d=2, nodes=9, T=0.5, M=8, N=0.5, method="direct")


@pytest.fixture(scope="module")
def optima_2d(smoke_2d):
    u, p, v_fp, fixed = solve_coupled_fixed_point(smoke_2d, relax=0.5, tol=1e-11, max_iter=5000)
    v_gd, descent = optimize_gradient(smoke_2d, step_rule="bb", tol=1e-11, max_iter=5000)
    return v_fp, fixed, v_gd, descent


def test_fixed_point_and_descent_agree(smoke_2d, optima_2d):
    v_fp, fixed, v_gd, descent = optima_2d
    assert fixed.converged and descent.converged
    assert fixed.optimality_residual <= 1e-8
    assert descent.optimality_residual <= 1e-8
    assert l2_control(v_fp - v_gd) / l2_control(v_gd) <= 1e-6
    cost_fp = evaluate_cost(smoke_2d, v_fp).total
    cost_gd = evaluate_cost(smoke_2d, v_gd).total
    assert abs(cost_fp - cost_gd) <= 1e-10 * abs(cost_gd)
    assert cost_fp <= evaluate_cost(smoke_2d, zero_field(smoke_2d.mesh, smoke_2d.time)).total


def test_descent_history_decreases(optima_2d):
    _, _, _, descent = optima_2d
    costs = np.array(descent.costs)
    assert np.all(np.diff(costs) <= 1e-12 * abs(costs[0]))
    assert costs[-1] < costs[0]


def test_optimality_residual_definition(problem_1d):
    v = _random_control(problem_1d, 6)
    g, _, _ = reduced_gradient(problem_1d, v)
    assert optimality_residual(v, g) == pytest.approx(l2_control(g) / max(1.0, l2_control(v)))


def test_kappa_sweep_trends():
    problem = make_problem(d=1, nodes=17, T=0.5, M=8, N=0.1, method="direct")
    rows = kappa_sweep(problem, [1.0, 10.0, 100.0], tol=1e-10, max_iter=20000)
    assert all(row["converged"] for row in rows)
    misfits = [row["terminal_misfit"] for row in rows]
    controls = [row["control_norm"] for row in rows]
    assert all(b <= a + 1e-8 for a, b in zip(misfits, misfits[1:]))
    assert all(b >= a - 1e-8 for a, b in zip(controls, controls[1:]))

    v, _ = optimize_gradient(problem, tol=1e-10, max_iter=20000)
    u, _, _ = solve_state(problem, v)
    assert rows[0]["terminal_misfit"] == pytest.approx(l2_slice(u - problem.u_T, -1), rel=1e-6)


def test_kappa_sweep_pool_keeps_order():
    problem = make_problem(d=1, nodes=9, T=0.5, M=6, N=0.5, method="direct")
    serial = kappa_sweep(problem, [1.0, 4.0], tol=1e-9)
    pooled = kappa_sweep(problem, [1.0, 4.0], tol=1e-9, workers=2)
    assert [row["kappa"] for row in pooled] == [1.0, 4.0]
    for a, b in zip(serial, pooled):
        assert b["terminal_misfit"] == pytest.approx(a["terminal_misfit"], rel=1e-12)


def test_kappa_sweep_rejects_bad_lists(problem_1d):
    with pytest.raises(ValueError):
        kappa_sweep(problem_1d, [1.0, -2.0])
    with pytest.raises(ValueError):
        kappa_sweep(problem_1d, [10.0, 1.0])


def _linear_target_problem(M, target):
    mesh = build_mesh(1, 9)
    time = build_time_axis(1.0, M)
    u_T = sample_function(mesh, time, target)
    zero = zero_field(mesh, time)
    return build_problem(mesh, time, zero, u_T, box_mask(mesh, [0.2], [0.8]), 1.0, override_coefficients(1.0, 1.0))


def test_target_identity_zero_target():
    assert target_identity_check(_linear_target_problem(10, lambda x, t: 0.0)) == 0.0


def test_target_identity_first_order():
    errors, steps = [], []
    for M in (20, 40, 80):
        problem = _linear_target_problem(M, lambda x, t: sine_product(x) * t)
        errors.append(target_identity_check(problem))
        steps.append(problem.time.dt)
    assert min(observed_orders(errors, steps)) > 0.9


def test_energy_identity_gap_shrinks():
    mesh = build_mesh(1, 9)
    zero_time = build_time_axis(1.0, 4)
    problem = build_problem(
        mesh, zero_time, zero_field(mesh, zero_time), zero_field(mesh, zero_time),
        box_mask(mesh, [0.2], [0.8]), 1.0, override_coefficients(1.0, 2.0),
    )
    lhs, rhs, gap = energy_identity_check(problem, zero_field(mesh, zero_time))
    assert lhs == 0.0 and rhs == 0.0 and gap == 0.0

    gaps, steps = [], []
    for M in (20, 40, 80):
        time = build_time_axis(1.0, M)
        problem_M = build_problem(
            mesh, time, zero_field(mesh, time), zero_field(mesh, time),
            box_mask(mesh, [0.2], [0.8]), 1.0, override_coefficients(1.0, 2.0),
        )
        u = sample_function(mesh, time, lambda x, t: sine_product(x) * (t + t**2))
        _, _, gap = energy_identity_check(problem_M, u, apply_H(u, 2.0))
        gaps.append(abs(gap))
        steps.append(time.dt)
    assert min(observed_orders(gaps, steps)) > 0.9


def test_continuous_adjoint_gap_shrinks():
    gaps = []
    for M in (10, 20, 40):
        problem = make_problem(M=M)
        v = sample_function(problem.mesh, problem.time, lambda x, t: sine_product(x))
        gaps.append(continuous_adjoint_gap(problem, v))
    assert gaps[0] > gaps[1] > gaps[2]


def test_target_identity_exact_for_steady_target():
    # H* of a constant is integrated exactly by the backward recurrence
    assert target_identity_check(_linear_target_problem(16, lambda x, t: sine_product(x))) < 1e-13


@pytest.mark.parametrize("lam", [0.25, 0.5, 0.9])
def test_cost_is_strongly_convex_in_the_control(lam):
    problem = make_problem(method="direct")
    v1 = _random_control(problem, 31)
    v2 = _random_control(problem, 32) * 3.0
    mixed = evaluate_cost(problem, v1 * lam + v2 * (1.0 - lam)).total
    j1 = evaluate_cost(problem, v1).total
    j2 = evaluate_cost(problem, v2).total
    bound = lam * j1 + (1.0 - lam) * j2 - 0.5 * problem.N * lam * (1.0 - lam) * l2_control(v1 - v2) ** 2
    assert mixed <= bound + 1e-12 * max(abs(j1), abs(j2))


def test_descent_reaches_same_optimum_from_two_starts():
    problem = make_problem(N=0.5, method="direct")
    v_zero, first = optimize_gradient(problem, tol=1e-11, max_iter=5000)
    v_far, second = optimize_gradient(problem, tol=1e-11, max_iter=5000, v0=_random_control(problem, 40) * 5.0)
    assert first.converged and second.converged
    assert l2_control(v_zero - v_far) / l2_control(v_zero) <= 1e-6


def test_descent_stops_on_gradient_norm_for_small_controls():
    problem = make_problem(target=0.1, method="direct")
    v, report = optimize_gradient(problem, tol=1e-9)
    assert report.converged
    assert l2_control(v) < 1.0
    g, _, _ = reduced_gradient(problem, v)
    assert l2_control(g) <= 1e-9
    assert report.optimality_residual == pytest.approx(l2_control(g), rel=1e-12)


@pytest.fixture(scope="module")
def bump_problem():
    """2D tracking of a sine target under a gaussian source, N = 1e-2."""
    mesh = build_mesh(2, 17)
    time = build_time_axis(1.0, 32)
    f = sample_function(mesh, time, make_preset({"kind": "gaussian"}))
    u_T = sample_function(mesh, time, make_preset({"kind": "sine"}))
    omega = box_mask(mesh, [0.25, 0.25], [0.75, 0.75])
    return build_problem(mesh, time, f, u_T, omega, 1e-2, constants(3, 1.0), linear_method="direct")


@pytest.fixture(scope="module")
def bump_fixed_point(bump_problem):
    return solve_coupled_fixed_point(bump_problem, relax=0.5, tol=1e-10, max_iter=20000)


def test_fixed_point_meets_optimality_on_bump_problem(bump_problem, bump_fixed_point):
    _, p, v, report = bump_fixed_point
    assert report.converged
    assert report.optimality_residual <= 1e-8
    # v = -chi p / N on the slices that reach the state
    residual = control_field(bump_problem, v * bump_problem.N + p)
    assert l2_control(residual) / max(1.0, l2_control(v)) <= 1e-8

    v_gd, descent = optimize_gradient(bump_problem, tol=1e-11, max_iter=20000)
    assert descent.converged
    assert l2_control(v - v_gd) / l2_control(v_gd) <= 1e-6


def test_fixed_point_cost_history_never_rises(bump_fixed_point):
    costs = np.array(bump_fixed_point[3].costs)
    assert np.all(np.diff(costs) <= 1e-12 * max(1.0, abs(costs[0])))
    assert costs[-1] < costs[0]


def test_kappa_sweep_trends_2d(bump_problem):
    rows = kappa_sweep(bump_problem, [1.0, 10.0, 100.0, 1000.0], tol=1e-10, max_iter=20000)
    assert all(row["converged"] for row in rows)
    misfits = [row["terminal_misfit"] for row in rows]
    controls = [row["control_norm"] for row in rows]
    assert all(b <= a + 1e-8 for a, b in zip(misfits, misfits[1:]))
    assert all(b >= a - 1e-8 for a, b in zip(controls, controls[1:]))
