import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cell import constants, override_coefficients  # noqa: E402
from domain import box_mask, build_mesh, build_problem, build_time_axis, sample_function  # noqa: E402
from helpers import sine_product  # noqa: E402


def make_problem(d=1, nodes=17, T=0.5, M=10, coeffs=None, N=1.0, target=1.0, forcing=0.0, method="cg"):
    """Small smooth problem: u_T = target sin(pi x)(1 + t), f = forcing sin(pi x), omega = (0.2, 0.8)^d."""
    mesh = build_mesh(d, nodes)
    time = build_time_axis(T, M)
    u_T = sample_function(mesh, time, lambda x, t: target * sine_product(x) * (1.0 + t))
    f = sample_function(mesh, time, lambda x, t: forcing * sine_product(x))
    omega = box_mask(mesh, [0.2] * d, [0.8] * d)
    return build_problem(mesh, time, f, u_T, omega, N, coeffs or constants(3, 1.0), linear_method=method)


@pytest.fixture
def coeffs3():
    return constants(3, 1.0)


@pytest.fixture
def unit_coeffs():
    return override_coefficients(1.0, 1.0)


@pytest.fixture
def problem_1d():
    return make_problem()


@pytest.fixture
def zero_problem():
    return make_problem(target=0.0, forcing=0.0)
