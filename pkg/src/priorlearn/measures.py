"""Gaussian measures on the discretized spaces.

Covariances are negative powers of shifted Laplacians, C0 = (s + c * (-Lap))^{-p},
expressed through an eigenbasis that is simultaneously exact for the discrete
(stiffness, mass) pencil on uniform grids and trigonometric in closed form:

* Dirichlet 1D:  e_k(x) = sqrt(2) sin(k pi x), k = 1, 2, ...
* Neumann 1D:    e_0 = 1, e_k(x) = sqrt(2) cos(k pi x), k = 1, 2, ...
* 2D: tensor products of the 1D families.

The nodal samples of these functions are generalized eigenvectors of the
uniform-grid P1/bilinear pencil, hence exactly M-orthogonal; they are
normalized numerically so <e_k, e_l>_M = delta_kl to machine precision.  The
associated scalar eigenvalues use the continuum symbol
lambda_k^2-ish = (shift + scale * mu_k)^{-power} with mu_k = k^2 pi^2 (summed
over axes in 2D), so downstream closed forms hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .space import Field, Grid, MassMatrix, inner_product

__all__ = [
    "SpectralCovariance",
    "SpectralGaussian",
    "TruncatedGaussian",
    "build_laplacian_covariance",
    "sample",
    "kl_gaussian",
    "cameron_martin_norm_sq",
    "sample_truncated",
    "psi_e_bound",
]


def _axis_modes_1d(grid: Grid, bc: str, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodal trig eigenvector samples and continuum Laplacian eigenvalues."""
    x = grid.axis_coords
    if bc == "dirichlet":
        ks = np.arange(1, k_max + 1)
        vecs = np.sin(np.pi * np.outer(ks, x))
    elif bc == "neumann":
        ks = np.arange(0, k_max)
        vecs = np.cos(np.pi * np.outer(ks, x))
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")
    return vecs, (ks * np.pi) ** 2


@dataclass
class SpectralCovariance:
    """Finite-rank spectral covariance sum_k lam2_k e_k (x) e_k.

    eigvecs : (K, n_nodes) nodal eigenvector samples, M-orthonormal.
    lam2    : (K,) positive eigenvalues of the covariance (lambda_k^2).
    """

    grid: Grid
    mass: MassMatrix
    eigvecs: np.ndarray
    lam2: np.ndarray
    bc: str

    @property
    def n_modes(self) -> int:
        return self.lam2.shape[0]

    def coeffs(self, f: Field) -> np.ndarray:
        """M-inner-product coefficients <f, e_k>_M for all modes."""
        return self.eigvecs @ self.mass.dot(f.values)

    def synth(self, a: np.ndarray) -> Field:
        """sum_k a_k e_k as a Field."""
        return Field(self.grid, a @ self.eigvecs)

    def apply(self, f: Field) -> Field:
        """C0 f = sum_k lam2_k <f, e_k>_M e_k."""
        return self.synth(self.lam2 * self.coeffs(f))


@dataclass
class SpectralGaussian:
    """Gaussian measure N(mean, covariance) with a spectral covariance."""

    mean: Field
    covariance: SpectralCovariance


@dataclass
class TruncatedGaussian:
    """A spectral Gaussian conditioned on the ball ||u||_M <= radius."""

    base: SpectralGaussian
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")


def build_laplacian_covariance(
    grid: Grid,
    mass: MassMatrix,
    *,
    bc: str = "dirichlet",
    shift: float = 0.0,
    scale: float = 1.0,
    power: float = 1.0,
    n_modes: int | None = None,
) -> SpectralCovariance:
    """Covariance (shift + scale * (-Laplacian))^{-power} with bc boundary.

    Modes are sorted by decreasing eigenvalue; n_modes defaults to the largest
    exactly-representable count (N-2 Dirichlet / N Neumann per axis).
    """
    n_ax = grid.nodes_per_axis
    max_ax = n_ax - 2 if bc == "dirichlet" else n_ax
    if grid.dimension == 1:
        k_default = max_ax
    else:
        k_default = max_ax**2
    if n_modes is None:
        n_modes = k_default
    if n_modes < 1 or n_modes > k_default:
        raise ValueError(f"n_modes must be in [1, {k_default}], got {n_modes}")

    vecs1, mu1 = _axis_modes_1d(grid, bc, max_ax)
    if grid.dimension == 1:
        vecs, mu = vecs1, mu1
    else:
        # tensor modes, x-fastest node ordering: e_{kx,ky}(x,y) = ex(x) ey(y)
        vecs = np.einsum("ay,bx->abyx", vecs1, vecs1).reshape(
            max_ax * max_ax, n_ax * n_ax
        )
        mu = (mu1[:, None] + mu1[None, :]).ravel()

    lam2_all = (shift + scale * mu) ** (-power)
    if np.any(~np.isfinite(lam2_all)) or np.any(lam2_all <= 0.0):
        raise ValueError("covariance spectrum must be positive and finite")
    order = np.argsort(-lam2_all, kind="stable")[:n_modes]
    vecs = vecs[order]
    lam2 = lam2_all[order]

    # numerically M-orthonormalize (the trig vectors are exactly M-orthogonal
    # on the uniform grid, so only a per-vector scaling is needed)
    mvec = mass.matrix.dot(vecs.T)  # (n_nodes, K)
    norms = np.sqrt(np.einsum("kn,nk->k", vecs, mvec))
    vecs = vecs / norms[:, None]
    return SpectralCovariance(grid, mass, vecs, lam2, bc)


def sample(
    measure: SpectralGaussian, rng: np.random.Generator, size: int = 1
) -> list[Field]:
    """Karhunen-Loeve sampling: mean + sum_k lambda_k xi_k e_k, xi ~ N(0,1)."""
    cov = measure.covariance
    lam = np.sqrt(cov.lam2)
    xi = rng.standard_normal((size, cov.n_modes))
    draws = (xi * lam) @ cov.eigvecs + measure.mean.values
    return [Field(cov.grid, row) for row in draws]


def cameron_martin_norm_sq(f: Field, cov: SpectralCovariance) -> float:
    """||f||^2 in the Cameron-Martin space of N(0, cov): sum_k <f,e_k>_M^2 / lam2_k.

    Raises if f has a component outside the retained eigenspace (relative
    M-norm residual above 1e-8), since the true norm is then infinite.
    """
    a = cov.coeffs(f)
    f_norm_sq = inner_product(f, f, cov.mass)
    resid = f_norm_sq - float(a @ a)
    if resid > 1e-8 * max(f_norm_sq, 1e-30) + 1e-14:
        raise ValueError("field lies outside the Cameron-Martin space")
    return float(np.sum(a * a / cov.lam2))


def kl_gaussian(p: SpectralGaussian, q: SpectralGaussian) -> float:
    """KL(p || q) for Gaussians sharing an eigenbasis (same modes, any order).

    KL = 1/2 sum_k [ lp_k/lq_k - 1 - ln(lp_k/lq_k) + <mp - mq, e_k>_M^2 / lq_k ].
    The mean difference must lie in the shared eigenspace.
    """
    cp, cq = p.covariance, q.covariance
    if cp.grid != cq.grid or cp.n_modes != cq.n_modes or cp.bc != cq.bc:
        raise ValueError("kl_gaussian requires measures on a shared eigenbasis")
    # align q's modes with p's via the M-Gram matrix (a signed permutation
    # when both bases come from build_laplacian_covariance)
    gram = cp.eigvecs @ cq.mass.dot(cq.eigvecs.T)
    perm = np.argmax(np.abs(gram), axis=1)
    if len(set(perm.tolist())) != cp.n_modes or not np.allclose(
        np.abs(gram[np.arange(cp.n_modes), perm]), 1.0, atol=1e-8
    ):
        raise ValueError("eigenbases do not match up to a signed permutation")
    lq = cq.lam2[perm]
    ratio = cp.lam2 / lq
    dm = Field(cp.grid, p.mean.values - q.mean.values)
    a = cp.coeffs(dm)
    dm_norm_sq = inner_product(dm, dm, cp.mass)
    if dm_norm_sq - float(a @ a) > 1e-8 * max(dm_norm_sq, 1e-30) + 1e-14:
        raise ValueError("mean difference lies outside the shared eigenspace")
    return 0.5 * float(np.sum(ratio - 1.0 - np.log(ratio) + a * a / lq))


def sample_truncated(
    measure: TruncatedGaussian, rng: np.random.Generator, size: int = 1
) -> list[Field]:
    """Rejection sampling of the Gaussian conditioned on ||u||_M <= radius."""
    out: list[Field] = []
    mass = measure.base.covariance.mass
    r2 = measure.radius**2
    attempts = 0
    while len(out) < size:
        batch = sample(measure.base, rng, size=max(size - len(out), 16))
        for f in batch:
            if inner_product(f, f, mass) <= r2:
                out.append(f)
                if len(out) == size:
                    break
        attempts += len(batch)
        if attempts > 100000 * size:
            raise RuntimeError(
                "truncated-Gaussian rejection rate too high; "
                "increase radius or shrink the covariance"
            )
    return out


def psi_e_bound(measure: TruncatedGaussian, eps: float) -> float:
    """Upper bound on E[exp(eps ||u||_M^2)] under the truncated Gaussian.

    psi = exp((4 + 8 eps^2) R^2 / eps) * prod_k (1 - 4 eps lam2_k)^{-1/2},
    valid for 0 < eps < 1 / (4 lam2_max).  The mean must be zero.
    """
    lam2 = measure.base.covariance.lam2
    lam2_max = float(np.max(lam2))
    if not 0.0 < eps < 1.0 / (4.0 * lam2_max):
        raise ValueError(
            f"eps must lie in (0, {1.0 / (4.0 * lam2_max):.6g}) for this bound"
        )
    if np.any(measure.base.mean.values != 0.0):
        raise ValueError("psi_e_bound requires a centered base measure")
    r2 = measure.radius**2
    log_psi = (4.0 + 8.0 * eps**2) * r2 / eps - 0.5 * float(
        np.sum(np.log1p(-4.0 * eps * lam2))
    )
    return float(np.exp(log_psi))
