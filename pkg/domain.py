"""
Grids, fields, control regions and discrete norms shared by every solver.

Interior nodes are flattened in C order over the interior index box, so a
slice is a 1D array of length prod(nodes_per_axis - 2). Boundary values are
homogeneous Dirichlet and never stored.

Space integrals sum over the interior nodes with weight h^d each. For fields
vanishing on the boundary this is the trapezoid rule, second order in h. A
field that does not vanish there loses the boundary layer: a constant c on
the unit box has l2_slice = |c| (1 - h)^(d/2), an O(h) deficit.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from cell import HomogenizedCoefficients


def _frozen_array(values, dtype=float):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Mesh:
    d: int
    nodes_per_axis: Tuple[int, ...]
    box: Tuple[Tuple[float, float], ...]

    @property
    def h(self):
        return tuple(
            (hi - lo) / (n - 1) for (lo, hi), n in zip(self.box, self.nodes_per_axis)
        )

    @property
    def interior_shape(self):
        return tuple(n - 2 for n in self.nodes_per_axis)

    @property
    def n_interior(self):
        return int(np.prod(self.interior_shape))

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def axis_coordinates(self, axis):
        lo, hi = self.box[axis]
        return np.linspace(lo, hi, self.nodes_per_axis[axis])

    def interior_coordinates(self):
        """Coordinates of the interior nodes, shape (n_interior, d)."""
        axes = [self.axis_coordinates(i)[1:-1] for i in range(self.d)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def boundary_coordinates(self):
        axes = [self.axis_coordinates(i) for i in range(self.d)]
        grids = np.meshgrid(*axes, indexing="ij")
        points = np.stack([g.ravel() for g in grids], axis=1)
        index = np.stack(
            [g.ravel() for g in np.meshgrid(*[np.arange(n) for n in self.nodes_per_axis], indexing="ij")],
            axis=1,
        )
        return points[self.is_boundary_index(index)]

    def is_boundary_index(self, index):
        """True where any coordinate index is 0 or nodes_per_axis - 1."""
        index = np.atleast_2d(index)
        last = np.asarray(self.nodes_per_axis) - 1
        return np.any((index == 0) | (index == last), axis=1)

    def interior_index(self, flat):
        """Grid index tuple (boundary counted) of a flattened interior node."""
        inner = np.unravel_index(flat, self.interior_shape)
        return tuple(int(i) + 1 for i in inner)


@dataclass(frozen=True)
class TimeAxis:
    T: float
    M: int

    @property
    def dt(self):
        return self.T / self.M

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.M + 1)

    def trapezoid_weights(self):
        weights = np.full(self.M + 1, self.dt)
        weights[0] = weights[-1] = 0.5 * self.dt
        return weights

    def control_weights(self):
        # right-endpoint rule: slice 0 never reaches the state
        weights = np.full(self.M + 1, self.dt)
        weights[0] = 0.0
        return weights


@dataclass(frozen=True, eq=False)
class ScalarField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.shape != (self.mesh.n_interior,):
            raise ValueError(
                f"ScalarField needs {self.mesh.n_interior} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("ScalarField values must be finite")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    mesh: Mesh
    time: TimeAxis
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values)
        expected = (self.time.M + 1, self.mesh.n_interior)
        if values.shape != expected:
            raise ValueError(f"SpaceTimeField needs shape {expected}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(
                f"non-finite value at node {self.mesh.interior_index(bad[1])}, t={self.time.times[bad[0]]}"
            )
        object.__setattr__(self, "values", values)

    def slice(self, k):
        return ScalarField(self.mesh, self.values[k])

    def final(self):
        return self.values[-1]

    def with_values(self, values):
        return SpaceTimeField(self.mesh, self.time, values)

    def _check_axes(self, other):
        if other.mesh != self.mesh or other.time != self.time:
            raise ValueError("fields live on different mesh/time axes")

    def __add__(self, other):
        self._check_axes(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        self._check_axes(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar):
        return self.with_values(float(scalar) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


@dataclass(frozen=True, eq=False)
class RegionMask:
    mesh: Mesh
    indicator: np.ndarray

    def __post_init__(self):
        indicator = _frozen_array(self.indicator, dtype=bool)
        if indicator.shape != (self.mesh.n_interior,):
            raise ValueError("RegionMask indicator must have one entry per interior node")
        object.__setattr__(self, "indicator", indicator)

    @property
    def count(self):
        return int(self.indicator.sum())

    def apply(self, field):
        """Multiply by the indicator; accepts fields or raw arrays."""
        if isinstance(field, SpaceTimeField):
            return field.with_values(field.values * self.indicator)
        if isinstance(field, ScalarField):
            return ScalarField(field.mesh, field.values * self.indicator)
        return np.asarray(field) * self.indicator


@dataclass(frozen=True, eq=False)
class ControlProblem:
    mesh: Mesh
    time: TimeAxis
    f: SpaceTimeField
    u_T: SpaceTimeField
    omega: RegionMask
    N: float
    coeffs: HomogenizedCoefficients
    linear_tol: float = 1e-10
    linear_method: str = "cg"


def build_mesh(d, nodes_per_axis, box=None):
    """
    Build a structured box mesh.

    Args:
        d (int): spatial dimension, 1, 2 or 3.
        nodes_per_axis (int or sequence): nodes per axis including boundary.
        box (sequence of (lo, hi)): extents, default unit box.

    Returns:
        Mesh
    """
    if d not in (1, 2, 3):
        raise ValueError(f"mesh dimension must be 1, 2 or 3, got {d}")
    if np.isscalar(nodes_per_axis):
        nodes_per_axis = (int(nodes_per_axis),) * d
    nodes_per_axis = tuple(int(n) for n in nodes_per_axis)
    if len(nodes_per_axis) != d:
        raise ValueError(f"expected {d} node counts, got {len(nodes_per_axis)}")
    if min(nodes_per_axis) < 3:
        raise ValueError(f"need at least 3 nodes per axis, got {nodes_per_axis}")
    if box is None:
        box = ((0.0, 1.0),) * d
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if len(box) != d or any(hi <= lo for lo, hi in box):
        raise ValueError(f"invalid box {box} for d={d}")
    return Mesh(d, nodes_per_axis, box)


def build_time_axis(T, M):
    if T <= 0:
        raise ValueError(f"final time T must be > 0, got {T}")
    if int(M) < 1:
        raise ValueError(f"number of time steps M must be >= 1, got {M}")
    return TimeAxis(float(T), int(M))


def zero_field(mesh, time):
    return SpaceTimeField(mesh, time, np.zeros((time.M + 1, mesh.n_interior)))


def sample_function(mesh, time, g):
    """
    Sample g(x, t) at every interior node and every time level.

    g receives the (n_interior, d) coordinate array and a float time and may
    return a scalar or an (n_interior,) array.
    """
    x = mesh.interior_coordinates()
    values = np.empty((time.M + 1, mesh.n_interior))
    for k, t in enumerate(time.times):
        sample = np.broadcast_to(np.asarray(g(x, t), dtype=float), (mesh.n_interior,))
        bad = np.flatnonzero(~np.isfinite(sample))
        if bad.size:
            raise ValueError(
                f"non-finite sample at node {mesh.interior_index(bad[0])}, x={x[bad[0]]}, t={t}"
            )
        values[k] = sample
    return SpaceTimeField(mesh, time, values)


def boundary_trace_max(mesh, time, g):
    """Largest |g| over boundary nodes and time levels."""
    x = mesh.boundary_coordinates()
    return max(
        float(np.max(np.abs(np.broadcast_to(np.asarray(g(x, t), dtype=float), (x.shape[0],)))))
        for t in time.times
    )


def box_mask(mesh, lower, upper):
    """Rasterize the open sub-box (lower, upper) to the interior nodes strictly inside it."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != (mesh.d,) or upper.shape != (mesh.d,):
        raise ValueError(f"control box corners must have {mesh.d} coordinates")
    x = mesh.interior_coordinates()
    indicator = np.all((x > lower) & (x < upper), axis=1)
    return RegionMask(mesh, indicator)


def full_mask(mesh):
    return RegionMask(mesh, np.ones(mesh.n_interior, dtype=bool))


def build_problem(mesh, time, f, u_T, omega, N, coeffs, linear_tol=1e-10, linear_method="cg", u_T_boundary_max=None):
    if N <= 0:
        raise ValueError(f"control weight N must be > 0, got {N}")
    for name, fld in (("f", f), ("u_T", u_T)):
        if fld.mesh != mesh or fld.time != time:
            raise ValueError(f"{name} is not defined on the problem mesh/time axes")
    if omega.mesh != mesh:
        raise ValueError("control region lives on a different mesh")
    if omega.count == 0:
        raise ValueError("control region contains no interior nodes")
    if u_T_boundary_max is not None:
        scale = max(1.0, float(np.max(np.abs(u_T.values))) if u_T.values.size else 1.0)
        if u_T_boundary_max > 1e-12 * scale:
            raise ValueError(
                f"target u_T must vanish on the boundary, found |u_T| = {u_T_boundary_max:.3e} there"
            )
    if linear_method not in ("cg", "direct"):
        raise ValueError(f"linear_method must be 'cg' or 'direct', got {linear_method}")
    return ControlProblem(mesh, time, f, u_T, omega, float(N), coeffs, float(linear_tol), linear_method)


# ----------------------------- quadrature -----------------------------


def _values(field):
    return field.values if isinstance(field, (SpaceTimeField, ScalarField)) else np.asarray(field)


def inner_slice(mesh, a, b):
    return mesh.cell_volume * float(np.dot(_values(a), _values(b)))


def inner_spacetime(a, b):
    """Trapezoid in time, cell volume in space."""
    weights = a.time.trapezoid_weights()
    return a.mesh.cell_volume * float(np.sum(weights * np.einsum("ki,ki->k", a.values, _values(b))))


def inner_control(a, b):
    """Right-endpoint rule in time; the inner product of controls and gradients."""
    weights = a.time.control_weights()
    return a.mesh.cell_volume * float(np.sum(weights * np.einsum("ki,ki->k", a.values, _values(b))))


def l2_spacetime(field):
    return np.sqrt(max(inner_spacetime(field, field), 0.0))


def l2_control(field):
    return np.sqrt(max(inner_control(field, field), 0.0))


def l2_slice(field, k=None):
    """L2(Omega) norm of slice k of a space-time field, or of a single slice."""
    values = _values(field) if k is None else field.values[k]
    return np.sqrt(field.mesh.cell_volume * float(np.dot(values, values)))


def grad_squared_slice(mesh, values):
    """|grad_h e|^2 integrated over Omega, forward differences over every edge."""
    grid = np.pad(np.asarray(values).reshape(mesh.interior_shape), 1)
    total = 0.0
    for axis, h in enumerate(mesh.h):
        total += float(np.sum(np.diff(grid, axis=axis) ** 2)) / h**2
    return mesh.cell_volume * total


def _interior_gradient_squared(mesh, values):
    # differences among stored nodes only (central inside, one-sided at the ends)
    grid = np.asarray(values).reshape(mesh.interior_shape)
    total = 0.0
    for axis, h in enumerate(mesh.h):
        if grid.shape[axis] > 1:
            total += float(np.sum(np.gradient(grid, h, axis=axis) ** 2))
    return mesh.cell_volume * total


def h1_seminorm_slice(field, k):
    return np.sqrt(_interior_gradient_squared(field.mesh, field.values[k]))


def h1_seminorm_spacetime(field):
    """Reporting seminorm; the cost uses grad_squared_slice, which sees the zero boundary."""
    weights = field.time.trapezoid_weights()
    squares = np.array([_interior_gradient_squared(field.mesh, row) for row in field.values])
    return np.sqrt(float(np.sum(weights * squares)))


def max_abs(field):
    return float(np.max(np.abs(_values(field)))) if _values(field).size else 0.0
