"""
Forward state and backward adjoint solvers of the homogenized problem on a
box mesh: implicit Euler in time, (2d+1)-point Laplacian in space, the memory
term substituted exactly into the step matrix.
"""

import time as wallclock
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, splu

from domain import h1_seminorm_slice
from logging_config import logger
from memory import DiscreteHOperator, apply_H_star, apply_H_star_adjoint, dH_dt


class SolverError(RuntimeError):
    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class SolveReport:
    steps: int
    max_iterations: int
    max_residual: float
    seconds: float

    def as_dict(self):
        return {
            "steps": self.steps,
            "max_iterations": self.max_iterations,
            "max_residual": self.max_residual,
            "seconds": self.seconds,
        }


# ----------------------------- operators -----------------------------


@lru_cache(maxsize=16)
def negative_laplacian(mesh):
    """-Delta_h on the interior nodes, homogeneous Dirichlet, CSR."""
    shape = mesh.interior_shape
    total = None
    for axis, (m, h) in enumerate(zip(shape, mesh.h)):
        second = sp.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], shape=(m, m)) / h**2
        factors = [sp.identity(k, format="csr") for k in shape]
        factors[axis] = second
        term = factors[0]
        for factor in factors[1:]:
            term = sp.kron(term, factor, format="csr")
        total = term if total is None else total + term
    return sp.csr_matrix(total)


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """I/dt - Delta_h + sigma, symmetric positive definite for dt > 0, sigma >= 0."""

    mesh: object
    dt: float
    sigma: float
    matrix: sp.csr_matrix
    jacobi: np.ndarray
    factor: object = None

    def apply(self, x):
        return self.matrix @ x


@lru_cache(maxsize=32)
def step_operator(mesh, dt, sigma, method="cg"):
    if dt <= 0:
        raise ValueError(f"time step must be > 0, got {dt}")
    if sigma < 0:
        raise ValueError(f"reaction shift must be >= 0, got {sigma}")
    n = mesh.n_interior
    matrix = sp.csr_matrix(sp.identity(n) / dt + negative_laplacian(mesh) + sigma * sp.identity(n))
    jacobi = 1.0 / matrix.diagonal()
    factor = splu(matrix.tocsc()) if method == "direct" else None
    return EllipticOperator(mesh, dt, sigma, matrix, jacobi, factor)


def apply_laplacian(mesh, values):
    """Delta_h of one slice (note the sign: returns the Laplacian, not its negative)."""
    return -(negative_laplacian(mesh) @ np.asarray(values, dtype=float))


def implicit_step_solve(operator, rhs, tol=1e-10, x0=None, maxiter=None):
    """
    Solve operator.matrix x = rhs to relative residual <= tol.

    Returns:
        (x, iterations, relative residual)
    """
    rhs = np.asarray(rhs, dtype=float)
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0.0:
        return np.zeros_like(rhs), 0, 0.0

    if operator.factor is not None:
        x = operator.factor.solve(rhs)
        iterations = 1
    else:
        n = rhs.shape[0]
        preconditioner = LinearOperator((n, n), matvec=lambda r: operator.jacobi * r)
        count = [0]

        def _count(_):
            count[0] += 1

        x, info = cg(
            operator.matrix,
            rhs,
            x0=x0,
            rtol=0.5 * tol,
            atol=0.0,
            maxiter=maxiter or 10 * n,
            M=preconditioner,
            callback=_count,
        )
        iterations = count[0]
        if info > 0:
            residual = np.linalg.norm(rhs - operator.matrix @ x) / norm_b
            raise SolverError(
                f"CG hit the iteration cap ({info}) with relative residual {residual:.3e}",
                residual=residual,
            )
    residual = np.linalg.norm(rhs - operator.matrix @ x) / norm_b
    if residual > tol:
        raise SolverError(f"linear solve residual {residual:.3e} exceeds tolerance {tol:.1e}", residual=residual)
    return x, iterations, residual


class _StepLog:
    def __init__(self):
        self.start = wallclock.perf_counter()
        self.steps = 0
        self.max_iterations = 0
        self.max_residual = 0.0

    def record(self, iterations, residual):
        self.steps += 1
        self.max_iterations = max(self.max_iterations, iterations)
        self.max_residual = max(self.max_residual, residual)

    def report(self):
        return SolveReport(self.steps, self.max_iterations, self.max_residual, wallclock.perf_counter() - self.start)


def _solve_step(operator, rhs, tol, x0, step, log):
    try:
        x, iterations, residual = implicit_step_solve(operator, rhs, tol, x0=x0)
    except SolverError as error:
        raise SolverError(f"step {step}: {error}", step=step, residual=error.residual) from error
    log.record(iterations, residual)
    return x


def _memory_step_operator(problem):
    coeffs = problem.coeffs
    memory = DiscreteHOperator.for_time(coeffs.B, problem.time)
    # 1 - B mu equals exp(-B dt), so the substituted shift is never negative
    shift = coeffs.A * (1.0 - coeffs.B * memory.mu)
    assert shift >= 0.0, f"memory-substituted reaction shift is negative: {shift}"
    operator = step_operator(problem.mesh, problem.time.dt, shift, problem.linear_method)
    return memory, operator


# ----------------------------- state -----------------------------


def solve_state(problem, v):
    """
    March the homogenized state equation forward from u^0 = 0.

    Each step solves
        (I/dt - Delta + A (1 - B mu)) u^{k+1}
            = u^k / dt + f^{k+1} + chi v^{k+1} + A B exp(-B dt) H^k
    and then advances H^{k+1} = exp(-B dt) H^k + mu u^{k+1}.

    Returns:
        (u, Hu, SolveReport)
    """
    if v.mesh != problem.mesh or v.time != problem.time:
        raise ValueError("control is not defined on the problem axes")
    A, B = problem.coeffs.A, problem.coeffs.B
    memory, operator = _memory_step_operator(problem)
    decay, mu, dt = memory.decay, memory.mu, problem.time.dt

    forcing = problem.f.values + v.values * problem.omega.indicator
    u = np.zeros_like(forcing)
    H = np.zeros_like(forcing)
    log = _StepLog()
    for k in range(problem.time.M):
        rhs = u[k] / dt + forcing[k + 1] + A * B * decay * H[k]
        u[k + 1] = _solve_step(operator, rhs, problem.linear_tol, u[k], k + 1, log)
        H[k + 1] = decay * H[k] + mu * u[k + 1]

    report = log.report()
    logger.debug(f"state solve: {report.as_dict()}")
    return v.with_values(u), v.with_values(H), report


# ----------------------------- adjoint -----------------------------


def adjoint_sources(problem, u, Hu, kappa=1.0):
    """
    Per-slice right-hand side of the exact discrete adjoint of J0^kappa.

    These are the gradients of the four tracking terms of the discrete cost
    with respect to u^k, divided by dt times the cell volume.
    """
    A, B = problem.coeffs.A, problem.coeffs.B
    c4 = problem.coeffs.strange_weight
    time = problem.time
    dt = time.dt
    scale = (time.trapezoid_weights() / dt)[:, None]
    L = negative_laplacian(problem.mesh)

    misfit = u.values - problem.u_T.values
    rate = dH_dt(Hu, u, B)
    rate_transposed = apply_H_star_adjoint(rate, B).values
    memory = DiscreteHOperator.for_time(B, time)
    terminal_strange = problem.u_T.values[-1] - B * Hu.values[-1]
    decay_to_T = np.exp(B * (time.times - time.T))[:, None]

    sources = scale * ((L @ misfit.T).T + A * rate.values - A * B * rate_transposed)
    sources[-1] += misfit[-1] / dt
    sources -= B * c4 * (memory.mu / dt) * decay_to_T * terminal_strange[None, :]
    return kappa * sources


def solve_adjoint(problem, u, Hu, kappa=1.0):
    """
    Backward march of the exact discrete adjoint.

    p is the transpose of solve_state applied to the discrete cost gradient:
    with G^{M+1} = 0, for k = M..1
        (I/dt - Delta + A (1 - B mu)) p^k
            = s^k + p^{k+1} / dt + A B exp(-B dt) G^{k+1},
        G^k = mu p^k + exp(-B dt) G^{k+1},
    where s are the adjoint_sources. The reduced gradient on slices 1..M is
    then exactly N v + chi p. Slice 0 is filled by one more step of the same
    march; it does not enter the gradient.

    Returns:
        (p, SolveReport)
    """
    A, B = problem.coeffs.A, problem.coeffs.B
    memory, operator = _memory_step_operator(problem)
    decay, mu, dt = memory.decay, memory.mu, problem.time.dt

    sources = adjoint_sources(problem, u, Hu, kappa)
    M = problem.time.M
    p = np.zeros_like(sources)
    G = np.zeros(problem.mesh.n_interior)
    p_next = np.zeros(problem.mesh.n_interior)
    log = _StepLog()
    for k in range(M, -1, -1):
        rhs = sources[k] + p_next / dt + A * B * decay * G
        p[k] = _solve_step(operator, rhs, problem.linear_tol, p_next, k, log)
        G = mu * p[k] + decay * G
        p_next = p[k]

    report = log.report()
    logger.debug(f"adjoint solve: {report.as_dict()}")
    return u.with_values(p), report


def solve_adjoint_continuous(problem, u, Hu):
    """
    The limit adjoint problem discretized as written:
        -p_t - Delta p + A (p - B H*(p))
            = -Delta (u - u_T) + A (u - B^2 H*(H(u)) - exp(B (t - T)) u_T(T)),
        p(T) = (u - u_T)(T),
    with H* from its own backward recurrence. Agrees with solve_adjoint to
    O(dt + h^2).
    """
    A, B = problem.coeffs.A, problem.coeffs.B
    memory, operator = _memory_step_operator(problem)
    decay, mu, dt = memory.decay, memory.mu, problem.time.dt
    time = problem.time
    L = negative_laplacian(problem.mesh)

    misfit = u.values - problem.u_T.values
    star_of_H = apply_H_star(Hu, B).values
    decay_to_T = np.exp(B * (time.times - time.T))[:, None]
    sources = (L @ misfit.T).T + A * (u.values - B**2 * star_of_H - decay_to_T * problem.u_T.values[-1][None, :])

    p = np.zeros_like(misfit)
    p[-1] = misfit[-1]
    star = np.zeros(problem.mesh.n_interior)
    log = _StepLog()
    for k in range(time.M - 1, -1, -1):
        rhs = p[k + 1] / dt + sources[k] + A * B * decay * star
        p[k] = _solve_step(operator, rhs, problem.linear_tol, p[k + 1], k, log)
        star = decay * star + mu * p[k]

    return u.with_values(p), log.report()


def stability_monitor(u):
    """max over time levels of the discrete H1 seminorm."""
    return float(max(h1_seminorm_slice(u, k) for k in range(u.time.M + 1)))
