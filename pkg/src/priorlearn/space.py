"""Discretized function spaces on (0,1) and (0,1)^2.

Functions are represented by nodal coefficients of continuous piecewise-linear
(1D hat / 2D bilinear) Lagrange elements on uniform grids.  The mass matrix
``M`` with entries ``M[k, l] = \\int phi_k phi_l`` induces the discrete L2
inner product ``<a, b>_M = a^T M b`` used throughout the package.

2D nodal vectors are stored x-fastest: node (ix, iy) maps to index
``iy * nx + ix``.  This ordering is part of the file-format contract.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid",
    "Field",
    "MassMatrix",
    "inner_product",
    "lift_measurements",
    "resample",
    "relative_l2_error",
    "save_field",
    "load_field",
]


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [0,1]^dimension.

    Attributes
    ----------
    dimension : 1 or 2.
    nodes_per_axis : number of nodes along each axis (N_ax >= 2).
    """

    dimension: int
    nodes_per_axis: int

    def __post_init__(self) -> None:
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        if self.nodes_per_axis < 2:
            raise ValueError("nodes_per_axis must be >= 2")

    @property
    def n_nodes(self) -> int:
        return self.nodes_per_axis**self.dimension

    @property
    def h(self) -> float:
        """Mesh width."""
        return 1.0 / (self.nodes_per_axis - 1)

    @property
    def axis_coords(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nodes_per_axis)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, dimension), x-fastest order."""
        x = self.axis_coords
        if self.dimension == 1:
            return x[:, None]
        xx, yy = np.meshgrid(x, x, indexing="xy")  # rows vary in y
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass
class Field:
    """A function on a grid, stored as nodal coefficients."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"values must have shape ({self.grid.n_nodes},), "
                f"got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())


def _mass_matrix_1d(n: int, lumped: bool) -> sp.csr_matrix:
    h = 1.0 / (n - 1)
    if lumped:
        d = np.full(n, h)
        d[0] = d[-1] = h / 2.0
        return sp.diags(d).tocsr()
    main = np.full(n, 2.0 * h / 3.0)
    main[0] = main[-1] = h / 3.0
    off = np.full(n - 1, h / 6.0)
    return sp.diags([off, main, off], [-1, 0, 1]).tocsr()


@dataclass
class MassMatrix:
    """Sparse FEM mass matrix for a grid (consistent by default)."""

    grid: Grid
    lumped: bool = False
    matrix: sp.csr_matrix = field(init=False, repr=False)
    _solve: object = field(init=False, default=None, repr=False)

    def __post_init__(self) -> None:
        m1 = _mass_matrix_1d(self.grid.nodes_per_axis, self.lumped)
        if self.grid.dimension == 1:
            self.matrix = m1
        else:
            # x-fastest ordering: index = iy * nx + ix  ->  kron(My, Mx)
            self.matrix = sp.kron(m1, m1, format="csr")

    def dot(self, v: np.ndarray) -> np.ndarray:
        return self.matrix.dot(v)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._solve is None:
            self._solve = spla.factorized(self.matrix.tocsc())
        return self._solve(rhs)


def inner_product(a: Field, b: Field, mass: MassMatrix) -> float:
    """The M-weighted inner product a^T M b (approximates the L2 pairing)."""
    if a.grid != b.grid or mass.grid != a.grid:
        raise ValueError("inner_product requires a shared grid")
    return float(a.values @ mass.dot(b.values))


def norm(a: Field, mass: MassMatrix) -> float:
    return float(np.sqrt(max(inner_product(a, a, mass), 0.0)))


def lift_measurements(d: np.ndarray, s_op: np.ndarray, mass: MassMatrix) -> Field:
    """Adjoint lifting of a data vector to a function: M^{-1} S^T d.

    The result g satisfies the adjoint identity (S u) . d = <u, g>_M for all u.
    """
    d = np.asarray(d, dtype=float)
    s_op = np.asarray(s_op, dtype=float)
    n = mass.grid.n_nodes
    if s_op.shape != (d.shape[0], n):
        raise ValueError(
            f"measurement matrix shape {s_op.shape} inconsistent with "
            f"data length {d.shape[0]} and grid size {n}"
        )
    return Field(mass.grid, mass.solve(s_op.T @ d))


def resample(f: Field, target: Grid) -> Field:
    """Piecewise-(bi)linear interpolation of nodal values onto a new grid."""
    if f.grid.dimension != target.dimension:
        raise ValueError("resample requires matching dimensions")
    if f.grid == target:
        return f.copy()
    xs = f.grid.axis_coords
    xt = target.axis_coords
    if f.grid.dimension == 1:
        return Field(target, np.interp(xt, xs, f.values))
    n = f.grid.nodes_per_axis
    vals = f.values.reshape(n, n)  # [iy, ix]
    # interpolate along x then y (separable bilinear interpolation)
    tmp = np.empty((n, target.nodes_per_axis))
    for iy in range(n):
        tmp[iy] = np.interp(xt, xs, vals[iy])
    out = np.empty((target.nodes_per_axis, target.nodes_per_axis))
    for ix in range(target.nodes_per_axis):
        out[:, ix] = np.interp(xt, xs, tmp[:, ix])
    return Field(target, out.ravel())


def relative_l2_error(estimate: Field, truth: Field, mass: MassMatrix) -> float:
    """``||estimate - truth||_M / ||truth||_M``."""
    if estimate.grid != truth.grid:
        raise ValueError("relative_l2_error requires a shared grid")
    tnorm = norm(truth, mass)
    if tnorm <= 0.0:
        raise ValueError("truth has zero norm")
    diff = Field(truth.grid, estimate.values - truth.values)
    return norm(diff, mass) / tnorm


def save_field(f: Field, path: str) -> None:
    """Binary field file: one JSON header line, then little-endian float64."""
    header = {
        "dimension": f.grid.dimension,
        "nodes_per_axis": f.grid.nodes_per_axis,
        "ordering": "x-fastest",
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("ascii"))
        fh.write(f.values.astype("<f8").tobytes())


def load_field(path: str) -> Field:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = fh.read()
    grid = Grid(header["dimension"], header["nodes_per_axis"])
    values = np.frombuffer(raw, dtype="<f8").copy()
    return Field(grid, values)
