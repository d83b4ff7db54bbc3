"""Forward models and data-misfit potentials.

Two forward problems are provided:

* ``HeatModel`` -- recover the initial condition of the 1D heat equation on
  (0, 1) with zero Dirichlet boundary from the solution at time T.  The
  solution operator is diagonal in the Dirichlet sine basis:
  G u = sum_k exp(-k^2 pi^2 T) <u, e_k>_M e_k.

* ``DarcyModel`` -- recover the log-diffusivity u of
  -div(exp(u) grad w) = f on (0, 1)^2 with w = 0 on the boundary, from
  mollified point observations of the pressure w.

Gradients of potentials are returned as M-gradients: fields g such that
dPhi[v] = <g, v>_M for every direction v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .measures import build_laplacian_covariance
from .space import Field, Grid, MassMatrix

__all__ = [
    "HeatModel",
    "DarcyModel",
    "MeasurementSet",
    "Observation",
    "identity_measurements",
    "mollified_measurements",
    "heat_forward",
    "darcy_solve",
    "measure",
    "potential_grad_u",
]


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


@dataclass
class MeasurementSet:
    """A linear observation operator S: fields -> R^m.

    matrix : (m, n_nodes) dense rows s_j, acting on nodal coefficients.
    kernels : optional (m, n_nodes) kernels k_j with s_j = M k_j / (1^T M k_j);
        when present, the adjoint lift M^{-1} S^T d has the closed form
        sum_j d_j k_j / (1^T M k_j) and needs no mass solve.
    """

    grid: Grid
    mass: MassMatrix
    matrix: np.ndarray
    kernels: np.ndarray | None = None
    kernel_scales: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def apply(self, f: Field) -> np.ndarray:
        return self.matrix @ f.values

    def lift(self, d: np.ndarray) -> Field:
        """Adjoint lift M^{-1} S^T d as a Field."""
        d = np.asarray(d, dtype=float)
        if self.kernels is not None:
            return Field(self.grid, (d / self.kernel_scales) @ self.kernels)
        return Field(self.grid, self.mass.solve(self.matrix.T @ d))


def identity_measurements(grid: Grid, mass: MassMatrix) -> MeasurementSet:
    """Full-field observation with S = M, so that (S u) . v = <u, v>_M.

    With this convention the data vector is paired against nodal values and
    the adjoint lift of a nodal data vector d is d itself.
    """
    n = grid.n_nodes
    return MeasurementSet(
        grid,
        mass,
        np.asarray(mass.matrix.todense()),
        kernels=np.eye(n),
        kernel_scales=np.ones(n),
    )


def mollified_measurements(
    grid: Grid,
    mass: MassMatrix,
    points: np.ndarray,
    *,
    delta_cells: float = 2.0,
    delta: float | None = None,
) -> MeasurementSet:
    """Local-average observations s_j u = <k_j, u>_M / <k_j, 1>_M.

    k_j is a Gaussian bump of width delta (defaulting to delta_cells * h)
    centered at points[j], truncated to zero beyond 4 delta.  Pass an
    explicit physical delta to build consistent operators on different
    grids.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coords = grid.coords()
    if delta is None:
        delta = delta_cells * grid.h
    d2 = np.sum((coords[None, :, :] - points[:, None, :]) ** 2, axis=2)
    kernels = np.exp(-d2 / (2.0 * delta**2))
    kernels[np.sqrt(d2) > 4.0 * delta] = 0.0
    mk = kernels @ np.asarray(mass.matrix.todense())
    scales = mk.sum(axis=1)
    if np.any(scales <= 0.0):
        raise ValueError("a measurement kernel vanished; check the points")
    return MeasurementSet(grid, mass, mk / scales[:, None], kernels, scales)


@dataclass
class Observation:
    """One noisy observation y = S u_dagger + noise with noise std tau."""

    y: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float)
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")


def measure(
    mset: MeasurementSet,
    f: Field,
    tau: float,
    rng: np.random.Generator | None = None,
) -> Observation:
    """Apply the observation operator and add iid N(0, tau^2) noise."""
    y = mset.apply(f)
    if rng is not None:
        y = y + tau * rng.standard_normal(y.shape)
    return Observation(y, tau)


# ---------------------------------------------------------------------------
# heat (backward diffusion)
# ---------------------------------------------------------------------------


class HeatModel:
    """Heat solution map at time T, diagonal in the Dirichlet sine basis."""

    def __init__(self, grid: Grid, mass: MassMatrix, t_final: float = 0.02,
                 n_modes: int | None = None):
        if grid.dimension != 1:
            raise ValueError("HeatModel is one-dimensional")
        cov = build_laplacian_covariance(
            grid, mass, bc="dirichlet", power=1.0, n_modes=n_modes
        )
        self.grid = grid
        self.mass = mass
        self.t_final = t_final
        self.eigvecs = cov.eigvecs  # (K, n_nodes), M-orthonormal
        ks = np.arange(1, cov.n_modes + 1)
        self.decay = np.exp(-(ks**2) * np.pi**2 * t_final)

    def apply(self, f: Field) -> Field:
        a = self.eigvecs @ self.mass.dot(f.values)
        return Field(self.grid, (self.decay * a) @ self.eigvecs)


def heat_forward(model: HeatModel, u: Field) -> Field:
    return model.apply(u)


# ---------------------------------------------------------------------------
# Darcy flow
# ---------------------------------------------------------------------------

# bilinear-element stiffness on a square with unit coefficient; node order
# (SW, SE, NE, NW).  Independent of the element size on a uniform square mesh.
_KE = (1.0 / 6.0) * np.array(
    [
        [4.0, -1.0, -2.0, -1.0],
        [-1.0, 4.0, -1.0, -2.0],
        [-2.0, -1.0, 4.0, -1.0],
        [-1.0, -2.0, -1.0, 4.0],
    ]
)


class DarcyModel:
    """-div(exp(u) grad w) = f on the unit square, w = 0 on the boundary.

    Bilinear elements on the uniform grid; the coefficient is piecewise
    constant per element, c_e = exp(mean of the four nodal u values).
    Factorizations are cached per assembled operator (keyed on u), so the
    repeated solves of Newton/Gauss-Newton iterations reuse one LU.
    """

    def __init__(self, grid: Grid, mass: MassMatrix, source: Field | None = None):
        if grid.dimension != 2:
            raise ValueError("DarcyModel is two-dimensional")
        self.grid = grid
        self.mass = mass
        if source is None:
            source = Field(grid, np.ones(grid.n_nodes))
        self.load = mass.dot(source.values)  # consistent load vector

        n = grid.nodes_per_axis
        ex, ey = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="xy")
        sw = (ey * n + ex).ravel()
        self.elem_nodes = np.column_stack([sw, sw + 1, sw + n + 1, sw + n])
        idx = np.arange(grid.n_nodes).reshape(n, n)
        self.boundary = np.concatenate(
            [idx[0], idx[-1], idx[1:-1, 0], idx[1:-1, -1]]
        )
        self.interior = np.setdiff1d(np.arange(grid.n_nodes), self.boundary)
        self._rows = np.repeat(self.elem_nodes, 4, axis=1).ravel()
        self._cols = np.tile(self.elem_nodes, (1, 4)).ravel()
        self._cache_key: bytes | None = None
        self._cache: dict | None = None

    # -- assembly ----------------------------------------------------------

    def coefficients(self, u: Field) -> np.ndarray:
        """Per-element coefficient exp(mean of the four nodal values)."""
        return np.exp(np.mean(u.values[self.elem_nodes], axis=1))

    def _assembled(self, u: Field) -> dict:
        key = u.values.tobytes()
        if self._cache_key == key:
            return self._cache
        c = self.coefficients(u)
        data = (c[:, None, None] * _KE[None, :, :]).ravel()
        a_full = sp.csr_matrix(
            (data, (self._rows, self._cols)),
            shape=(self.grid.n_nodes,) * 2,
        )
        a_int = a_full[np.ix_(self.interior, self.interior)].tocsc()
        self._cache_key = key
        self._cache = {
            "c": c,
            "solve": spla.factorized(a_int),
        }
        return self._cache

    def _solve_interior(self, u: Field, rhs_full: np.ndarray) -> np.ndarray:
        asm = self._assembled(u)
        w = np.zeros(self.grid.n_nodes)
        w[self.interior] = asm["solve"](rhs_full[self.interior])
        return w

    # -- forward / linearizations ------------------------------------------

    def solve(self, u: Field) -> Field:
        return Field(self.grid, self._solve_interior(u, self.load))

    def apply_stiffness_weighted(
        self, c_weights: np.ndarray, w: np.ndarray
    ) -> np.ndarray:
        """sum_e c_weights[e] * K_e w_e, scattered to nodes."""
        we = w[self.elem_nodes]  # (E, 4)
        ke_we = we @ _KE.T
        out = np.zeros(self.grid.n_nodes)
        np.add.at(out, self.elem_nodes.ravel(), (c_weights[:, None] * ke_we).ravel())
        return out

    def linearized(self, u: Field, w: Field, v: Field) -> Field:
        """Derivative of u -> w(u) in direction v (one cached solve)."""
        asm = self._assembled(u)
        vbar = np.mean(v.values[self.elem_nodes], axis=1)
        rhs = -self.apply_stiffness_weighted(asm["c"] * vbar, w.values)
        return Field(self.grid, self._solve_interior(u, rhs))

    def adjoint_solve(self, u: Field, rhs: np.ndarray) -> Field:
        """Solve with the (symmetric) assembled operator; rhs is nodal."""
        return Field(self.grid, self._solve_interior(u, rhs))

    def grad_scatter(self, u: Field, w: Field, p: Field) -> np.ndarray:
        """Euclidean gradient of u -> p^T A(u) w: per element (c_e/4) p^T K_e w
        spread equally over the element's four nodes."""
        asm = self._assembled(u)
        we = w.values[self.elem_nodes]
        pe = p.values[self.elem_nodes]
        per_elem = 0.25 * asm["c"] * np.einsum("ei,ij,ej->e", pe, _KE, we)
        out = np.zeros(self.grid.n_nodes)
        np.add.at(out, self.elem_nodes.ravel(), np.repeat(per_elem, 4))
        return out


def darcy_solve(model: DarcyModel, u: Field) -> Field:
    return model.solve(u)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


def potential_grad_u(
    model,
    mset: MeasurementSet,
    obs: Observation,
    u: Field,
) -> tuple[float, Field]:
    """Data-misfit potential Phi(u; y) and its M-gradient.

    HeatModel (full-field data, possibly unbounded noise support):
        Phi = (1/tau^2) (1/2 ||G u||_M^2 - <y, G u>_M),
        grad = G (G u - y) / tau^2  (G is self-adjoint in M).

    DarcyModel (finite-dimensional data):
        Phi = ||S w(u) - y||^2 / (2 tau^2),
        grad via one adjoint solve.
    """
    tau2 = obs.tau**2
    if isinstance(model, HeatModel):
        gu = model.apply(u)
        y = Field(model.grid, obs.y)
        phi = (
            0.5 * float(gu.values @ model.mass.dot(gu.values))
            - float(y.values @ model.mass.dot(gu.values))
        ) / tau2
        resid = Field(model.grid, gu.values - y.values)
        return phi, Field(model.grid, model.apply(resid).values / tau2)

    if isinstance(model, DarcyModel):
        w = model.solve(u)
        r = mset.apply(w) - obs.y
        phi = 0.5 * float(r @ r) / tau2
        p = model.adjoint_solve(u, mset.matrix.T @ (r / tau2))
        g_eucl = -model.grad_scatter(u, w, p)
        return phi, Field(model.grid, model.mass.solve(g_eucl))

    raise TypeError(f"unknown forward model {type(model).__name__}")
