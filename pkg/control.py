"""
The limit cost functional J0 (and its kappa-weighted variant), the reduced
gradient N v + chi p, the coupled fixed-point driver, an independent
steepest-descent minimizer, and the algebraic identities of the memory term.

J0 is quadratic in v, so cost differences between two controls are computed
as <v1 - v0, (g0 + g1) / 2>, which stays accurate where a plain difference
of two totals would be lost to round-off.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from domain import (
    grad_squared_slice,
    h1_seminorm_spacetime,
    inner_control,
    l2_control,
    l2_slice,
    l2_spacetime,
    max_abs,
    zero_field,
)
from logging_config import logger
from memory import apply_H, apply_H_star, dH_dt
from solvers import SolverError, solve_adjoint, solve_adjoint_continuous, solve_state


@dataclass(frozen=True)
class CostBreakdown:
    term_grad: float
    term_final: float
    term_control: float
    term_strange_final: float
    term_strange_rate: float
    total: float
    kappa: float = 1.0

    def as_dict(self):
        return {
            "term_grad": self.term_grad,
            "term_final": self.term_final,
            "term_control": self.term_control,
            "term_strange_final": self.term_strange_final,
            "term_strange_rate": self.term_strange_rate,
            "total": self.total,
            "kappa": self.kappa,
        }


@dataclass
class OptimizeReport:
    iterations: int = 0
    gradient_norms: List[float] = field(default_factory=list)
    costs: List[float] = field(default_factory=list)
    optimality_residual: float = float("nan")
    converged: bool = False
    message: str = ""
    relax: Optional[float] = None

    def as_dict(self):
        return {
            "iterations": self.iterations,
            "optimality_residual": self.optimality_residual,
            "converged": self.converged,
            "message": self.message,
            "relax": self.relax,
            "final_cost": self.costs[-1] if self.costs else None,
            "final_gradient_norm": self.gradient_norms[-1] if self.gradient_norms else None,
        }


@dataclass(frozen=True, eq=False)
class Evaluation:
    v: object
    u: object
    Hu: object
    cost: CostBreakdown
    g: object = None
    p: object = None


def _check_kappa(kappa):
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")


def control_field(problem, v):
    """Restrict a control to omega and drop slice 0, which never reaches the state."""
    values = problem.omega.apply(v.values).copy()
    values[0] = 0.0
    return v.with_values(values)


def cost_from_state(problem, v, u, Hu, kappa=1.0):
    coeffs = problem.coeffs
    mesh, time = problem.mesh, problem.time
    misfit = u - problem.u_T
    weights = time.trapezoid_weights()

    grad_squares = np.array([grad_squared_slice(mesh, row) for row in misfit.values])
    term_grad = 0.5 * kappa * float(np.sum(weights * grad_squares))
    term_final = 0.5 * kappa * l2_slice(misfit, -1) ** 2
    term_control = 0.5 * problem.N * l2_control(problem.omega.apply(v)) ** 2
    strange_final = problem.u_T.values[-1] - coeffs.B * Hu.values[-1]
    term_strange_final = 0.5 * kappa * coeffs.strange_weight * mesh.cell_volume * float(strange_final @ strange_final)
    term_strange_rate = 0.5 * kappa * coeffs.A * l2_spacetime(dH_dt(Hu, u, coeffs.B)) ** 2

    total = term_grad + term_final + term_control + term_strange_final + term_strange_rate
    return CostBreakdown(term_grad, term_final, term_control, term_strange_final, term_strange_rate, total, kappa)


def evaluate_cost(problem, v):
    u, Hu, _ = solve_state(problem, v)
    return cost_from_state(problem, v, u, Hu)


def evaluate_cost_kappa(problem, v, kappa):
    _check_kappa(kappa)
    u, Hu, _ = solve_state(problem, v)
    return cost_from_state(problem, v, u, Hu, kappa)


def _evaluate(problem, v, kappa=1.0, with_gradient=True):
    u, Hu, _ = solve_state(problem, v)
    cost = cost_from_state(problem, v, u, Hu, kappa)
    if not with_gradient:
        return Evaluation(v, u, Hu, cost)
    p, _ = solve_adjoint(problem, u, Hu, kappa)
    g = control_field(problem, v * problem.N + p)
    return Evaluation(v, u, Hu, cost, g, p)


def reduced_gradient(problem, v, kappa=1.0):
    """
    g = N v + chi p on slices 1..M, zero outside omega and on slice 0.

    g is the Riesz representative of dJ0^kappa/dv in the control inner
    product, so <g, w> is the exact directional derivative.

    Returns:
        (g, u, p)
    """
    _check_kappa(kappa)
    result = _evaluate(problem, v, kappa)
    return result.g, result.u, result.p


def optimality_residual(v, g):
    return l2_control(g) / max(1.0, l2_control(v))


def _cost_change(old, new):
    return inner_control(new.v - old.v, (old.g + new.g) * 0.5)


def solve_coupled_fixed_point(problem, relax=0.5, tol=1e-10, max_iter=5000, v0=None, kappa=1.0, log_every=100):
    """
    Relaxed forward-backward sweep v <- (1 - theta) v - theta N^-1 chi p.

    theta is halved whenever a sweep would increase the cost. Stops when
    ||v_new - v_old|| / max(1, ||v_old||) <= tol.

    Returns:
        (u, p, v, OptimizeReport)
    """
    if not 0 < relax <= 1:
        raise ValueError(f"relaxation must lie in (0, 1], got {relax}")
    if tol <= 0:
        raise ValueError(f"tolerance must be > 0, got {tol}")
    _check_kappa(kappa)

    v = control_field(problem, v0 if v0 is not None else zero_field(problem.mesh, problem.time))
    current = _evaluate(problem, v, kappa)
    report = OptimizeReport(relax=relax)
    report.costs.append(current.cost.total)
    report.gradient_norms.append(l2_control(current.g))
    theta = relax
    slack = 1e-13

    while report.iterations < max_iter:
        sweep = control_field(problem, current.v * (1.0 - theta) - current.p * (theta / problem.N))
        trial = _evaluate(problem, sweep, kappa)
        if _cost_change(current, trial) > slack * max(1.0, abs(current.cost.total)):
            theta *= 0.5
            if theta < 1e-14:
                report.message = "relaxation underflow"
                break
            logger.debug(f"fixed point: cost increase, relaxation halved to {theta:.3e}")
            continue

        change = l2_control(trial.v - current.v) / max(1.0, l2_control(current.v))
        current = trial
        report.iterations += 1
        report.costs.append(current.cost.total)
        report.gradient_norms.append(l2_control(current.g))
        if report.iterations % log_every == 0:
            logger.info(
                f"fixed point {report.iterations}: cost={current.cost.total:.12e} "
                f"grad={report.gradient_norms[-1]:.3e} theta={theta:.3e}"
            )
        if change <= tol:
            report.converged = True
            report.message = "converged"
            break
    else:
        report.message = "max_iter reached"

    report.relax = theta
    report.optimality_residual = optimality_residual(current.v, current.g)
    return current.u, current.p, current.v, report


def optimize_gradient(problem, step_rule="bb", tol=1e-10, max_iter=5000, v0=None, kappa=1.0, log_every=100):
    """
    Steepest descent on v -> J0^kappa(v) with Armijo backtracking.

    step_rule "bb" tries the Barzilai-Borwein step first, "fixed" tries 1/N;
    either is halved until the Armijo decrease with constant 1e-4 holds.
    Stops on the optimality residual ||g|| / max(1, ||v||) <= tol. This is
    the plain ||g|| <= tol whenever ||v|| <= 1 and relative to ||v|| above.

    Returns:
        (v, OptimizeReport)
    """
    if step_rule not in ("bb", "fixed"):
        raise ValueError(f"unknown step rule '{step_rule}', expected 'bb' or 'fixed'")
    if tol <= 0:
        raise ValueError(f"tolerance must be > 0, got {tol}")
    _check_kappa(kappa)

    armijo = 1e-4
    v = control_field(problem, v0 if v0 is not None else zero_field(problem.mesh, problem.time))
    current = _evaluate(problem, v, kappa)
    previous = None
    report = OptimizeReport()
    report.costs.append(current.cost.total)
    report.gradient_norms.append(l2_control(current.g))

    while True:
        residual = optimality_residual(current.v, current.g)
        if residual <= tol:
            report.converged = True
            report.message = "converged"
            break
        if report.iterations >= max_iter:
            report.message = "max_iter reached"
            break

        step = 1.0 / problem.N
        if step_rule == "bb" and previous is not None:
            s = current.v - previous.v
            y = current.g - previous.g
            curvature = inner_control(s, y)
            if curvature > 0:
                step = inner_control(s, s) / curvature

        g_squared = inner_control(current.g, current.g)
        while True:
            trial = _evaluate(problem, control_field(problem, current.v - current.g * step), kappa)
            if _cost_change(current, trial) <= -armijo * step * g_squared:
                break
            step *= 0.5
            if step < 1e-14:
                trial = None
                break
        if trial is None:
            report.message = "line search stagnated"
            break

        previous, current = current, trial
        report.iterations += 1
        report.costs.append(current.cost.total)
        report.gradient_norms.append(l2_control(current.g))
        if report.iterations % log_every == 0:
            logger.info(
                f"descent {report.iterations}: cost={current.cost.total:.12e} "
                f"grad={report.gradient_norms[-1]:.3e} step={step:.3e}"
            )

    report.optimality_residual = optimality_residual(current.v, current.g)
    return current.v, report


def gradient_check(problem, v, w, lambdas=(1e-2, 1e-3, 1e-4), kappa=1.0):
    """Finite-difference directional derivatives of J0^kappa against <g, w>."""
    w = control_field(problem, w)
    g, _, _ = reduced_gradient(problem, v, kappa)
    predicted = inner_control(g, w)
    base = evaluate_cost_kappa(problem, v, kappa).total
    rows = []
    for lam in lambdas:
        shifted = evaluate_cost_kappa(problem, v + w * lam, kappa).total
        difference = (shifted - base) / lam
        rows.append(
            {
                "lambda": float(lam),
                "finite_difference": difference,
                "predicted": predicted,
                "relative_error": abs(difference - predicted) / max(abs(predicted), 1e-300),
            }
        )
    return rows


def _norm_row(problem, kappa, v, u, Hu):
    B = problem.coeffs.B
    misfit = u - problem.u_T
    strange_final = problem.u_T.values[-1] - B * Hu.values[-1]
    return {
        "kappa": float(kappa),
        "terminal_misfit": l2_slice(misfit, -1),
        "gradient_misfit": h1_seminorm_spacetime(misfit),
        "strange_final": float(np.sqrt(problem.mesh.cell_volume * np.sum(strange_final**2))),
        "strange_rate": l2_spacetime(dH_dt(Hu, u, B)),
        "control_norm": l2_control(v),
    }


def _sweep_row(problem, kappa, tol, max_iter, step_rule):
    try:
        v, report = optimize_gradient(problem, step_rule=step_rule, tol=tol, max_iter=max_iter, kappa=kappa)
        u, Hu, _ = solve_state(problem, v)
        row = _norm_row(problem, kappa, v, u, Hu)
        row.update(
            {
                "converged": report.converged,
                "iterations": report.iterations,
                "optimality_residual": report.optimality_residual,
                "error": "",
            }
        )
    except (SolverError, ValueError) as error:
        row = {"kappa": float(kappa), "converged": False, "iterations": 0, "error": str(error)}
    return row


def kappa_sweep(problem, kappas, tol=1e-10, max_iter=5000, step_rule="bb", workers=1):
    """Minimize J0^kappa for each kappa and tabulate the misfit and control norms."""
    kappas = [float(k) for k in kappas]
    if any(k <= 0 for k in kappas):
        raise ValueError(f"kappa values must be > 0, got {kappas}")
    if any(b <= a for a, b in zip(kappas, kappas[1:])):
        raise ValueError(f"kappa values must be increasing, got {kappas}")

    if workers > 1:
        from multiprocess import Pool

        with Pool(workers) as pool:
            rows = pool.map(lambda k: _sweep_row(problem, k, tol, max_iter, step_rule), kappas)
    else:
        rows = [_sweep_row(problem, k, tol, max_iter, step_rule) for k in kappas]
    for row in rows:
        logger.info(f"kappa sweep row: {row}")
    return rows


# ----------------------------- identities -----------------------------


def target_identity_check(problem):
    """
    max |H*(d_t u_T - B u_T) + u_T - exp(B (t - T)) u_T(T)| over nodes and times.
    """
    B = problem.coeffs.B
    time = problem.time
    target = problem.u_T
    rate = np.gradient(target.values, time.dt, axis=0)
    psi = target.with_values(rate - B * target.values)
    decay_to_T = np.exp(B * (time.times - time.T))[:, None]
    error = apply_H_star(psi, B).values + target.values - decay_to_T * target.values[-1][None, :]
    return max_abs(error)


def energy_identity_check(problem, u, Hu=None):
    """
    int (u^2 - B^2 H^2) against int (dH/dt)^2 + B int_Omega H(T)^2.

    Returns:
        (lhs, rhs, gap)
    """
    B = problem.coeffs.B
    if Hu is None:
        Hu = apply_H(u, B)
    lhs = l2_spacetime(u) ** 2 - B**2 * l2_spacetime(Hu) ** 2
    rhs = l2_spacetime(dH_dt(Hu, u, B)) ** 2 + B * l2_slice(Hu, -1) ** 2
    return lhs, rhs, lhs - rhs


def continuous_adjoint_gap(problem, v, kappa=1.0):
    """Relative distance between the exact discrete adjoint and the limit adjoint discretized as written."""
    u, Hu, _ = solve_state(problem, v)
    exact, _ = solve_adjoint(problem, u, Hu, kappa)
    written, _ = solve_adjoint_continuous(problem, u, Hu)
    reference = l2_spacetime(exact)
    difference = l2_spacetime(exact - written * kappa)
    return difference / reference if reference > 0 else difference
