"""
Manufactured-solution convergence study for the state equation.

u*(x, t) = g(x) t with g = prod sin(pi x_i) on the unit box. Since
H(t) = t / B - (1 - exp(-B t)) / B^2, the matching forcing is
    f = g (1 + d pi^2 t) + A g (1 - exp(-B t)) / B.
"""

import numpy as np

from domain import build_mesh, build_problem, build_time_axis, full_mask, l2_slice, sample_function, zero_field
from helpers import observed_orders, sine_product
from logging_config import logger
from solvers import solve_state


def exact_state(x, t):
    return sine_product(x) * t


def exact_memory(x, t, B):
    return sine_product(x) * (t / B - (1.0 - np.exp(-B * t)) / B**2)


def manufactured_forcing(d, A, B):
    def f(x, t):
        g = sine_product(x)
        return g * (1.0 + d * np.pi**2 * t) + A * g * (1.0 - np.exp(-B * t)) / B

    return f


def manufactured_problem(mesh, time, coeffs, linear_tol=1e-10, linear_method="cg"):
    f = sample_function(mesh, time, manufactured_forcing(mesh.d, coeffs.A, coeffs.B))
    zero = zero_field(mesh, time)
    return build_problem(mesh, time, f, zero, full_mask(mesh), 1.0, coeffs, linear_tol, linear_method)


def max_slice_error(u, exact):
    return max(l2_slice(u - exact, k) for k in range(u.time.M + 1))


def space_ladder(d, levels, T, M0, coeffs, linear_method="cg"):
    """Refine h with dt proportional to h^2; errors against the exact solution."""
    rows = []
    for level, nodes in enumerate(levels):
        mesh = build_mesh(d, nodes)
        time = build_time_axis(T, M0 * 4**level)
        problem = manufactured_problem(mesh, time, coeffs, linear_method=linear_method)
        u, _, report = solve_state(problem, zero_field(mesh, time))
        error = max_slice_error(u, sample_function(mesh, time, exact_state))
        rows.append({"nodes": nodes, "h": mesh.h[0], "dt": time.dt, "error": error, "max_cg_iterations": report.max_iterations})
        logger.info(f"space ladder h={mesh.h[0]:.4e} dt={time.dt:.4e} error={error:.6e}")
    orders = observed_orders([r["error"] for r in rows], [r["h"] for r in rows])
    return rows, [float(o) for o in orders]


def time_ladder(d, nodes, T, steps, coeffs, linear_method="cg"):
    """
    Fixed mesh, refining dt. Orders come from differences of successive
    solutions at the common time levels, which removes the spatial error.
    """
    mesh = build_mesh(d, nodes)
    solutions = []
    for M in steps:
        time = build_time_axis(T, M)
        problem = manufactured_problem(mesh, time, coeffs, linear_method=linear_method)
        u, _, _ = solve_state(problem, zero_field(mesh, time))
        solutions.append(u)

    rows = []
    for coarse, fine in zip(solutions, solutions[1:]):
        stride = fine.time.M // coarse.time.M
        difference = fine.values[::stride] - coarse.values
        error = max(np.sqrt(mesh.cell_volume * float(row @ row)) for row in difference)
        rows.append({"dt": coarse.time.dt, "difference": error})
        logger.info(f"time ladder dt={coarse.time.dt:.4e} difference={error:.6e}")
    orders = observed_orders([r["difference"] for r in rows], [r["dt"] for r in rows])
    return rows, [float(o) for o in orders]


def run_mms(d, levels, T, M0, time_nodes, time_steps, coeffs, linear_method="cg"):
    space_rows, space_orders = space_ladder(d, levels, T, M0, coeffs, linear_method)
    time_rows, time_orders = time_ladder(d, time_nodes, T, time_steps, coeffs, linear_method)
    return {
        "space": space_rows,
        "space_orders": space_orders,
        "time": time_rows,
        "time_orders": time_orders,
    }
