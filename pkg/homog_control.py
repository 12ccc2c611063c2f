#!/usr/bin/env python3
"""
Batch entry points for the homogenized optimal-control toolkit.

Usage: python homog_control.py constants --n 3 --c0 1
       python homog_control.py cell-verify --n 3 --c0 1 --eps-list 0.1 0.05 0.025
       python homog_control.py fixed-point --config run.json [--out-dir DIR] [--seed S] [--quiet]

Exit codes: 0 success, 2 config error, 3 acceptance failure, 4 solver
non-convergence.
"""

import argparse
import json
import os
import sys

import numpy as np

import cell
from control import (
    continuous_adjoint_gap,
    control_field,
    energy_identity_check,
    evaluate_cost,
    gradient_check,
    kappa_sweep,
    optimize_gradient,
    solve_coupled_fixed_point,
    target_identity_check,
)
from domain import l2_control, sample_function
from field_export import dump_summary, write_fields, write_iterations_csv, write_table_csv
from helpers import make_preset, observed_orders
from logging_config import logger, set_quiet, set_verbose
from manufactured import run_mms
from run_config import ConfigError, coefficients_from_config, control_from_config, load_config, problem_from_config
from solvers import SolverError, solve_adjoint, solve_adjoint_continuous, solve_state, stability_monitor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3
EXIT_SOLVER = 4


def _out_dir(config):
    return config["output"]["directory"]


def _write_run_fields(config, fields):
    output = config["output"]
    write_fields(fields, _out_dir(config), output["formats"], output["csv_slices"])


# ----------------------------- config commands -----------------------------


def run_solve_state(config):
    problem = problem_from_config(config)
    v = control_from_config(config, problem)
    u, Hu, report = solve_state(problem, v)
    _write_run_fields(config, {"u": u, "Hu": Hu, "v": v})
    summary = {
        "state_report": _report_dict(report),
        "u_max": float(np.max(np.abs(u.values))),
        "stability_monitor": stability_monitor(u),
    }
    return summary, EXIT_OK


def run_solve_adjoint(config):
    problem = problem_from_config(config)
    v = control_from_config(config, problem)
    u, Hu, state_report = solve_state(problem, v)
    p, adjoint_report = solve_adjoint(problem, u, Hu)
    p_written, _ = solve_adjoint_continuous(problem, u, Hu)
    _write_run_fields(config, {"u": u, "Hu": Hu, "p": p, "p_continuous": p_written})
    summary = {
        "state_report": _report_dict(state_report),
        "adjoint_report": _report_dict(adjoint_report),
        "continuous_adjoint_gap": continuous_adjoint_gap(problem, v),
    }
    return summary, EXIT_OK


def run_cost(config):
    problem = problem_from_config(config)
    v = control_from_config(config, problem)
    breakdown = evaluate_cost(problem, v)
    terms = [breakdown.term_grad, breakdown.term_final, breakdown.term_control, breakdown.term_strange_final, breakdown.term_strange_rate]
    consistent = abs(sum(terms) - breakdown.total) <= 1e-14 * max(1.0, abs(breakdown.total))
    return {"cost": breakdown.as_dict(), "total_is_sum": consistent}, EXIT_OK if consistent else EXIT_ACCEPTANCE


def run_optimize(config):
    problem = problem_from_config(config)
    solver, acceptance = config["solver"], config["acceptance"]
    v, report = optimize_gradient(
        problem,
        step_rule=solver["step_rule"],
        tol=solver["tol"],
        max_iter=solver["max_iter"],
        v0=control_from_config(config, problem),
        log_every=solver["log_every"],
    )
    u, Hu, _ = solve_state(problem, v)
    p, _ = solve_adjoint(problem, u, Hu)
    write_iterations_csv(report, _out_dir(config))
    _write_run_fields(config, {"u": u, "p": p, "v": v})
    summary = {"optimize": report.as_dict(), "cost": evaluate_cost(problem, v).as_dict()}
    if not report.converged:
        return summary, EXIT_SOLVER
    return summary, EXIT_OK if report.optimality_residual <= acceptance["optimality_residual"] else EXIT_ACCEPTANCE


def run_fixed_point(config):
    problem = problem_from_config(config)
    solver, acceptance = config["solver"], config["acceptance"]
    u, p, v, report = solve_coupled_fixed_point(
        problem,
        relax=solver["relax"],
        tol=solver["tol"],
        max_iter=solver["max_iter"],
        v0=control_from_config(config, problem),
        log_every=solver["log_every"],
    )
    write_iterations_csv(report, _out_dir(config))
    _write_run_fields(config, {"u": u, "p": p, "v": v})
    summary = {"fixed_point": report.as_dict(), "cost": evaluate_cost(problem, v).as_dict()}
    passed = report.optimality_residual <= acceptance["optimality_residual"]

    if solver["cross_check"]:
        v_descent, descent = optimize_gradient(
            problem, step_rule=solver["step_rule"], tol=solver["tol"], max_iter=solver["max_iter"], log_every=solver["log_every"]
        )
        reference = l2_control(v_descent)
        difference = l2_control(v - v_descent) / reference if reference > 0 else l2_control(v - v_descent)
        summary["cross_check"] = {"descent": descent.as_dict(), "relative_control_difference": difference}
        passed = passed and difference <= acceptance["agreement"]
        if not descent.converged:
            return summary, EXIT_SOLVER

    if not report.converged:
        return summary, EXIT_SOLVER
    return summary, EXIT_OK if passed else EXIT_ACCEPTANCE


def _gradcheck_passes(rows, threshold):
    errors = [row["relative_error"] for row in rows]
    if all(row["predicted"] == 0.0 and row["finite_difference"] == 0.0 for row in rows):
        return True
    best = int(np.argmin(errors))
    shrinking = all(a >= b for a, b in zip(errors[:best], errors[1 : best + 1]))
    return shrinking and errors[best] <= threshold


def run_gradcheck(config):
    problem = problem_from_config(config)
    rng = np.random.default_rng(config["seed"])
    v = control_from_config(config, problem)
    w = control_field(problem, v.with_values(rng.standard_normal(v.values.shape)))
    block = config["gradcheck"]
    rows = gradient_check(problem, v, w, block["lambdas"])
    write_table_csv(rows, os.path.join(_out_dir(config), "gradcheck.csv"))
    passed = _gradcheck_passes(rows, block["max_relative_error"])
    return {"gradcheck": rows, "passed": passed}, EXIT_OK if passed else EXIT_ACCEPTANCE


def _monotone(values, increasing, tol):
    if increasing:
        return all(b >= a - tol for a, b in zip(values, values[1:]))
    return all(b <= a + tol for a, b in zip(values, values[1:]))


def run_kappa_sweep(config):
    problem = problem_from_config(config)
    solver, acceptance = config["solver"], config["acceptance"]
    rows = kappa_sweep(
        problem,
        config["kappa_sweep"]["kappas"],
        tol=solver["tol"],
        max_iter=solver["max_iter"],
        step_rule=solver["step_rule"],
        workers=solver["workers"],
    )
    write_table_csv(rows, os.path.join(_out_dir(config), "kappa_sweep.csv"))
    summary = {"kappa_sweep": rows}
    if not all(row["converged"] for row in rows):
        return summary, EXIT_SOLVER
    tol = acceptance["trend_tol"]
    misfit_trend = _monotone([row["terminal_misfit"] for row in rows], increasing=False, tol=tol)
    control_trend = _monotone([row["control_norm"] for row in rows], increasing=True, tol=tol)
    summary.update({"terminal_misfit_non_increasing": misfit_trend, "control_norm_non_decreasing": control_trend})
    return summary, EXIT_OK if misfit_trend and control_trend else EXIT_ACCEPTANCE


def run_mms_command(config):
    block = config["mms"]
    coeffs = coefficients_from_config(config)
    results = run_mms(
        config["mesh"]["d"],
        block["levels"],
        config["time"]["T"],
        block["M0"],
        block["time_nodes"],
        block["time_steps"],
        coeffs,
        config["solver"]["linear_method"],
    )
    write_table_csv(results["space"], os.path.join(_out_dir(config), "mms_space.csv"))
    write_table_csv(results["time"], os.path.join(_out_dir(config), "mms_time.csv"))
    passed = min(results["space_orders"]) >= block["space_order_min"] and min(results["time_orders"]) >= block["time_order_min"]
    results["passed"] = passed
    return results, EXIT_OK if passed else EXIT_ACCEPTANCE


def run_identities(config):
    """Memory-term identities and the adjoint consistency gap on a dt-halving ladder."""
    base = problem_from_config(config)
    v_spec = config["problem"]["control"]
    rows = []
    for refinement in (1, 2, 4):
        config_k = json.loads(json.dumps(config))
        config_k["time"]["M"] = config["time"]["M"] * refinement
        problem = problem_from_config(config_k)
        if v_spec["kind"] == "file":
            v = control_from_config(config, base) if refinement == 1 else None
        else:
            v = sample_function(problem.mesh, problem.time, make_preset(v_spec))
        if v is None:
            break
        u, Hu, _ = solve_state(problem, v)
        lhs, rhs, gap = energy_identity_check(problem, u, Hu)
        rows.append(
            {
                "dt": problem.time.dt,
                "target_identity_error": target_identity_check(problem),
                "energy_lhs": lhs,
                "energy_rhs": rhs,
                "energy_gap": abs(gap),
                "adjoint_gap": continuous_adjoint_gap(problem, v),
            }
        )
    write_table_csv(rows, os.path.join(_out_dir(config), "identities.csv"))
    summary = {"identities": rows}
    passed = True
    if len(rows) > 1:
        minimum = config["acceptance"]["identity_order_min"]
        for key in ("target_identity_error", "energy_gap"):
            errors = [row[key] for row in rows]
            if max(errors) <= 1e-14:
                continue
            orders = [float(o) for o in observed_orders(errors, [row["dt"] for row in rows])]
            summary[f"{key}_orders"] = orders
            passed = passed and min(orders) >= minimum
    summary["passed"] = passed
    return summary, EXIT_OK if passed else EXIT_ACCEPTANCE


CONFIG_COMMANDS = {
    "solve-state": run_solve_state,
    "solve-adjoint": run_solve_adjoint,
    "cost": run_cost,
    "optimize": run_optimize,
    "fixed-point": run_fixed_point,
    "gradcheck": run_gradcheck,
    "kappa-sweep": run_kappa_sweep,
    "mms": run_mms_command,
    "identities": run_identities,
}


def _report_dict(report):
    # wall-clock time is logged, not summarized, so summaries stay reproducible
    data = report.as_dict()
    data.pop("seconds", None)
    return data


def run_config_command(command, args):
    try:
        config = load_config(args.config, out_dir=args.out_dir, seed=args.seed)
    except ConfigError as error:
        logger.error(str(error))
        return EXIT_CONFIG
    try:
        summary, code = CONFIG_COMMANDS[command](config)
    except ConfigError as error:
        logger.error(str(error))
        return EXIT_CONFIG
    except SolverError as error:
        logger.error(f"solver failure: {error}")
        dump_summary({"command": command, "config": config, "error": str(error), "exit_code": EXIT_SOLVER}, _out_dir(config))
        return EXIT_SOLVER
    summary.update({"command": command, "config": config, "exit_code": code})
    path = dump_summary(summary, _out_dir(config))
    logger.info(f"{command}: exit {code}, summary at {path}")
    return code


# ----------------------------- standalone commands -----------------------------


def run_constants(args):
    try:
        coeffs = cell.constants(args.n, args.c0)
    except ValueError as error:
        logger.error(str(error))
        return EXIT_CONFIG
    print(json.dumps(coeffs.as_dict(), sort_keys=True))
    return EXIT_OK


def run_cell_verify(args):
    eps_list = sorted(args.eps_list, reverse=True)
    try:
        coeffs = cell.constants(args.n, args.c0)
        rows = cell.flux_ladder(args.n, args.c0, eps_list)
        for row in rows:
            exact = cell.capacity_profile(args.n, args.c0, row["eps"], nodes=args.nodes)
            numeric = cell.radial_solve(args.n, exact.a, exact.R, nodes=args.nodes)
            reference = cell.explicit_profile(args.n, exact.a, exact.R, numeric.r)
            row["radial_max_error"] = float(np.max(np.abs(numeric.w - reference)))
    except ValueError as error:
        logger.error(str(error))
        return EXIT_CONFIG

    out_dir = args.out_dir
    write_table_csv(rows, os.path.join(out_dir, "cell_verify.csv"))
    errors = [row["A_relative_error"] for row in rows]
    extrapolated = cell.richardson_flux(args.n, args.c0, eps_list) if len(eps_list) > 1 else rows[-1]["A_estimate"]
    checks = {
        "final_A_within_band": errors[-1] <= args.band,
        "A_monotone": all(b < a for a, b in zip(errors, errors[1:])),
        "richardson_within_band": abs(extrapolated - coeffs.A) / coeffs.A <= args.band / 2,
        "final_B_within_band": rows[-1]["B_relative_error"] <= args.band,
        "radial_within_tol": max(row["radial_max_error"] for row in rows) <= args.radial_tol,
    }
    summary = {
        "command": "cell-verify",
        "coefficients": coeffs.as_dict(),
        "ladder": rows,
        "richardson_A": extrapolated,
        "checks": checks,
    }
    code = EXIT_OK if all(checks.values()) else EXIT_ACCEPTANCE
    summary["exit_code"] = code
    dump_summary(summary, out_dir)
    print(json.dumps({"checks": checks, "richardson_A": extrapolated, "A": coeffs.A}, sort_keys=True))
    return code


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    common.add_argument("--verbose", action="store_true", help="Log every linear solve")

    parser = argparse.ArgumentParser(description="Homogenized optimal control with a memory (strange) term")
    commands = parser.add_subparsers(dest="command", required=True)

    constants_parser = commands.add_parser("constants", parents=[common], help="Print gamma, A_n, B_n, omega_n as JSON")
    constants_parser.add_argument("--n", type=int, required=True)
    constants_parser.add_argument("--c0", type=float, required=True)

    cell_parser = commands.add_parser("cell-verify", parents=[common], help="Check the capacity cell problem against the effective constants")
    cell_parser.add_argument("--n", type=int, default=3)
    cell_parser.add_argument("--c0", type=float, default=1.0)
    cell_parser.add_argument("--eps-list", type=float, nargs="+", default=[0.1, 0.05, 0.025])
    cell_parser.add_argument("--nodes", type=int, default=4096)
    cell_parser.add_argument("--band", type=float, default=0.01, help="Relative acceptance band for A and B")
    cell_parser.add_argument("--radial-tol", type=float, default=1e-6)
    cell_parser.add_argument("--out-dir", default="out")

    for name in CONFIG_COMMANDS:
        sub = commands.add_parser(name, parents=[common])
        sub.add_argument("--config", required=True, help="RunConfig JSON file")
        sub.add_argument("--out-dir", help="Override output.directory")
        sub.add_argument("--seed", type=int, help="Override the config seed")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return EXIT_CONFIG if exit_request.code else EXIT_OK
    set_quiet(args.quiet)
    if args.verbose:
        set_verbose()

    if args.command == "constants":
        return run_constants(args)
    if args.command == "cell-verify":
        return run_cell_verify(args)
    return run_config_command(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
