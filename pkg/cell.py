"""
Effective constants of the homogenized problem and the capacity cell problem
that produces them.

A particle of radius a_eps = C0 * eps**gamma, gamma = n / (n - 2), sits at the
centre of a ball of radius eps / 4. The capacity potential w is harmonic in
the shell between them, equal to 1 on the particle and 0 on the outer sphere.
Its flux, summed over the eps**-n cells of a unit volume, tends to A_n.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import gamma as gamma_function

from helpers import relative_error, richardson_extrapolate


@dataclass(frozen=True)
class HomogenizedCoefficients:
    n: Optional[int]
    C0: Optional[float]
    gamma: Optional[float]
    omega_n: Optional[float]
    A: float
    B: float

    @property
    def strange_weight(self):
        """C0**(n-1) * omega_n, the weight of the terminal strange term (A / B for overrides)."""
        if self.n is None:
            return self.A / self.B
        return self.C0 ** (self.n - 1) * self.omega_n

    def a_eps(self, eps):
        return self.C0 * eps**self.gamma

    def as_dict(self):
        return {
            "n": self.n,
            "C0": self.C0,
            "gamma": self.gamma,
            "omega_n": self.omega_n,
            "A": self.A,
            "B": self.B,
            "strange_weight": self.strange_weight,
        }


@dataclass(frozen=True, eq=False)
class RadialProfile:
    n: int
    a: float
    R: float
    r: np.ndarray
    w: np.ndarray


def omega_n(n):
    """Surface measure of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / float(gamma_function(n / 2.0))


def _check_dimension(n, C0):
    if int(n) != n or n < 3:
        raise ValueError(f"n must be an integer >= 3 (critical exponent n/(n-2) is undefined for n={n})")
    if C0 <= 0:
        raise ValueError(f"C0 must be > 0, got {C0}")


def constants(n, C0):
    _check_dimension(n, C0)
    n = int(n)
    C0 = float(C0)
    w_n = omega_n(n)
    A = (n - 2) * C0 ** (n - 2) * w_n
    B = (n - 2) / C0
    coeffs = HomogenizedCoefficients(n=n, C0=C0, gamma=n / (n - 2), omega_n=w_n, A=A, B=B)
    compatible = coeffs.strange_weight * B
    assert abs(compatible - A) <= 1e-14 * A, f"C0^(n-1) omega_n B = {compatible} differs from A = {A}"
    return coeffs


def override_coefficients(A, B):
    """Coefficients given directly, for meshes that do not match a homogenization dimension."""
    if A < 0:
        raise ValueError(f"A must be >= 0, got {A}")
    if B <= 0:
        raise ValueError(f"B must be > 0, got {B}")
    return HomogenizedCoefficients(n=None, C0=None, gamma=None, omega_n=None, A=float(A), B=float(B))


def _shell_radii(n, C0, eps):
    _check_dimension(n, C0)
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    a = C0 * eps ** (n / (n - 2))
    R = eps / 4.0
    if a >= R:
        raise ValueError(f"particle radius a_eps={a:.3e} does not fit inside eps/4={R:.3e}")
    return a, R


def explicit_profile(n, a, R, r):
    r = np.asarray(r, dtype=float)
    return (r ** (2 - n) - R ** (2 - n)) / (a ** (2 - n) - R ** (2 - n))


def capacity_profile(n, C0, eps, nodes=256):
    if nodes < 16:
        raise ValueError(f"capacity profile needs at least 16 nodes, got {nodes}")
    a, R = _shell_radii(n, C0, eps)
    r = np.geomspace(a, R, nodes)
    w = explicit_profile(n, a, R, r)
    w[0], w[-1] = 1.0, 0.0
    return RadialProfile(n, a, R, r, w)


def radial_solve(n, a, R, nodes=1024):
    """
    Solve (r^(n-1) w')' = 0, w(a) = 1, w(R) = 0 by finite differences.

    The equation is written in s = ln r, where it reads
    (exp((n-2) s) w_s)_s = 0, and discretized with conservative differences on
    a uniform s-grid (log-spaced r), which is second order in 1/nodes.
    """
    if not 0 < a < R:
        raise ValueError(f"need 0 < a < R, got a={a}, R={R}")
    if nodes < 3:
        raise ValueError(f"radial solve needs at least 3 nodes, got {nodes}")
    s = np.linspace(math.log(a), math.log(R), nodes)
    s_mid = 0.5 * (s[1:] + s[:-1])
    # shift the exponent to keep the face weights O(1)
    weights = np.exp((n - 2) * (s_mid - s_mid[0]))
    if not np.all(np.isfinite(weights)) or weights.max() / weights.min() > 1e300:
        raise ValueError(f"radial system is singular for a={a}, R={R}, nodes={nodes}")

    m = nodes - 2
    left, right = weights[:-1], weights[1:]
    bands = np.zeros((3, m))
    bands[0, 1:] = -right[:-1]
    bands[1, :] = left + right
    bands[2, :-1] = -left[1:]
    rhs = np.zeros(m)
    rhs[0] = left[0] * 1.0

    w = np.empty(nodes)
    w[0], w[-1] = 1.0, 0.0
    w[1:-1] = solve_banded((1, 1), bands, rhs)
    return RadialProfile(n, a, R, np.exp(s), w)


def radial_flux(profile):
    """Discrete r^(n-1) w'(r) on each interval; constant for the exact solution."""
    s = np.log(profile.r)
    s_mid = 0.5 * (s[1:] + s[:-1])
    return np.exp((profile.n - 2) * s_mid) * np.diff(profile.w) / np.diff(s)


def shell_normal_derivative(n, C0, eps):
    """-dw/dr on the outer sphere r = eps / 4."""
    a, R = _shell_radii(n, C0, eps)
    return (n - 2) * R ** (1 - n) / (a ** (2 - n) - R ** (2 - n))


def shell_flux_prefactor(n, C0, eps):
    # leading term of the outer normal derivative as eps -> 0
    return eps * C0 ** (n - 2) * (n - 2) * 4.0 ** (n - 1)


def flux_constant(n, C0, eps):
    """Outward capacity flux of one cell times the cell density eps**-n."""
    _, R = _shell_radii(n, C0, eps)
    cell_flux = shell_normal_derivative(n, C0, eps) * R ** (n - 1) * omega_n(n)
    return cell_flux * eps ** (-n)


def boundary_rate(n, C0, eps):
    """eps**gamma times -dw/dr on the particle surface; tends to B_n."""
    a, R = _shell_radii(n, C0, eps)
    derivative = (n - 2) * a ** (1 - n) / (a ** (2 - n) - R ** (2 - n))
    return eps ** (n / (n - 2)) * derivative


def flux_ladder(n, C0, eps_list):
    """Flux and boundary-rate estimates over an eps ladder, with relative errors."""
    coeffs = constants(n, C0)
    rows = []
    for eps in eps_list:
        A_estimate = flux_constant(n, C0, eps)
        B_estimate = boundary_rate(n, C0, eps)
        rows.append(
            {
                "eps": float(eps),
                "A_estimate": A_estimate,
                "A_relative_error": relative_error(A_estimate, coeffs.A),
                "B_estimate": B_estimate,
                "B_relative_error": relative_error(B_estimate, coeffs.B),
            }
        )
    return rows


def richardson_flux(n, C0, eps_list):
    """Extrapolate the last two ladder values, assuming a halving ladder and an eps^2 error."""
    values = [flux_constant(n, C0, eps) for eps in eps_list]
    ratio = eps_list[-2] / eps_list[-1]
    return richardson_extrapolate(values[-2], values[-1], ratio=ratio, order=2)
