"""
The memory operator H(phi)(t) = int_0^t exp(-B (t - s)) phi(s) ds and its
time-reversed counterpart H*, computed as exponential-Euler recurrences

    H^{k+1}  = exp(-B dt) H^k      + mu phi^{k+1},   H^0  = 0
    H*^{k}   = exp(-B dt) H*^{k+1} + mu psi^{k},     H*^M = 0

with mu = (1 - exp(-B dt)) / B. Space enters only as a parameter, so every
recurrence acts on whole slices at once.
"""

import math
from dataclasses import dataclass

import numpy as np

from domain import ScalarField, SpaceTimeField


def recurrence_weights(B, dt):
    """(decay, mu) of one exponential-Euler step."""
    if B <= 0:
        raise ValueError(f"kernel rate B must be > 0, got {B}")
    if dt <= 0:
        raise ValueError(f"time step dt must be > 0, got {dt}")
    return math.exp(-B * dt), -math.expm1(-B * dt) / B


@dataclass(frozen=True, eq=False)
class MemoryAccumulator:
    B: float
    current: ScalarField
    k: int = 0


def start_accumulator(mesh, B):
    if B <= 0:
        raise ValueError(f"kernel rate B must be > 0, got {B}")
    return MemoryAccumulator(B, ScalarField(mesh, np.zeros(mesh.n_interior)), 0)


def step_H(acc, u_next, dt):
    """Advance H by one step with right-endpoint sampling of the input."""
    decay, mu = recurrence_weights(acc.B, dt)
    if u_next.mesh != acc.current.mesh:
        raise ValueError("input slice lives on a different mesh than the accumulator")
    values = decay * acc.current.values + mu * u_next.values
    return MemoryAccumulator(acc.B, ScalarField(acc.current.mesh, values), acc.k + 1)


def step_H_star(acc, psi_prev, dt):
    """Step H* backward from slice k to k - 1; acc.k counts down."""
    decay, mu = recurrence_weights(acc.B, dt)
    if psi_prev.mesh != acc.current.mesh:
        raise ValueError("input slice lives on a different mesh than the accumulator")
    values = decay * acc.current.values + mu * psi_prev.values
    return MemoryAccumulator(acc.B, ScalarField(acc.current.mesh, values), acc.k - 1)


@dataclass(frozen=True)
class DiscreteHOperator:
    """
    H and its exact transpose on raw (M + 1, nodes) arrays.

    forward is lower triangular in time, transpose is upper triangular.
    Nothing here stores an M x M matrix.
    """

    B: float
    dt: float
    M: int
    scheme: str = "exponential-euler-right"

    @classmethod
    def for_time(cls, B, time):
        recurrence_weights(B, time.dt)
        return cls(float(B), time.dt, time.M)

    @property
    def decay(self):
        return math.exp(-self.B * self.dt)

    @property
    def mu(self):
        return -math.expm1(-self.B * self.dt) / self.B

    def forward(self, phi):
        decay, mu = self.decay, self.mu
        out = np.zeros_like(phi, dtype=float)
        for k in range(self.M):
            out[k + 1] = decay * out[k] + mu * phi[k + 1]
        return out

    def transpose(self, psi, weights=None):
        """
        Transpose of forward with respect to sum_k weights_k <x^k, y^k>.

        weights=None means unit weights, i.e. the plain matrix transpose. Slice 0
        of the result is zero because forward never reads phi^0.
        """
        decay, mu = self.decay, self.mu
        if weights is None:
            weights = np.ones(self.M + 1)
        weights = np.asarray(weights, dtype=float)
        if np.any(weights[1:] <= 0):
            raise ValueError("transpose weights must be > 0 on slices 1..M")
        out = np.zeros_like(psi, dtype=float)
        running = np.zeros(psi.shape[1:])
        for k in range(self.M, 0, -1):
            running = weights[k] * psi[k] + decay * running
            out[k] = mu * running / weights[k]
        return out


def _operator(field, B):
    return DiscreteHOperator.for_time(B, field.time)


def apply_H(phi, B):
    acc = start_accumulator(phi.mesh, B)
    values = np.zeros_like(phi.values)
    for k in range(phi.time.M):
        acc = step_H(acc, phi.slice(k + 1), phi.time.dt)
        values[k + 1] = acc.current.values
    return phi.with_values(values)


def apply_H_star(psi, B):
    """H* discretized from its own backward equation, H*(T) = 0."""
    acc = MemoryAccumulator(B, ScalarField(psi.mesh, np.zeros(psi.mesh.n_interior)), psi.time.M)
    values = np.zeros_like(psi.values)
    for k in range(psi.time.M, 0, -1):
        acc = step_H_star(acc, psi.slice(k - 1), psi.time.dt)
        values[k - 1] = acc.current.values
    return psi.with_values(values)


def apply_H_star_adjoint(psi, B, weights=None):
    """
    Exact transpose of apply_H in the trapezoid time inner product of
    l2_spacetime, so <H phi, psi> = <phi, H*_adj psi> to round-off.
    """
    if weights is None:
        weights = psi.time.trapezoid_weights()
    return psi.with_values(_operator(psi, B).transpose(psi.values, weights))


def dH_dt(Hfield, phi, B):
    """dH/dt from the ODE itself: phi - B H."""
    if Hfield.mesh != phi.mesh or Hfield.time != phi.time:
        raise ValueError("H and phi live on different mesh/time axes")
    return phi.with_values(phi.values - B * Hfield.values)


def apply_H_quadrature(phi, B):
    """Composite-trapezoid quadrature of the explicit kernel; O(M^2) reference."""
    times = phi.time.times
    values = np.zeros_like(phi.values)
    for k in range(1, phi.time.M + 1):
        kernel = np.exp(-B * (times[k] - times[: k + 1]))
        weights = np.full(k + 1, phi.time.dt)
        weights[0] = weights[-1] = 0.5 * phi.time.dt
        values[k] = (weights * kernel) @ phi.values[: k + 1]
    return phi.with_values(values)
