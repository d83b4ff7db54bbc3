"""Bayesian inversion: closed-form linear posteriors and Newton-CG MAP.

Posterior convention: with m observations y_1..y_m (shared noise std tau),
tempering parameter beta, and Gaussian prior N(f, C0), the posterior density
is proportional to exp(-(beta/m) sum_j Phi(u; y_j)) d N(f, C0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import (
    DarcyModel,
    HeatModel,
    MeasurementSet,
    Observation,
    potential_grad_u,
)
from .measures import SpectralGaussian
from .space import Field, MassMatrix

__all__ = [
    "LinearPosterior",
    "MapResult",
    "linear_posterior",
    "posterior_trace",
    "map_newton_cg",
]


@dataclass
class LinearPosterior:
    """Gaussian posterior for the (linear) heat problem.

    mean_history[i] is the posterior-mean estimate after i+1 CG iterations on
    the data-space system; mean == mean_history[-1].
    """

    prior: SpectralGaussian
    model: HeatModel
    beta: float
    tau: float
    n_obs: int
    mean: Field
    mean_history: list[Field]
    iterations: int
    _solve_data: object = field(repr=False, default=None)

    def apply_covariance(self, v: Field) -> Field:
        """Posterior covariance applied to a field:
        C_p v = C0 v - C0 G (tau^2/beta + G C0 G)^{-1} G C0 v."""
        cov = self.prior.covariance
        c0v = cov.apply(v)
        z, _ = self._solve_data(self.model.apply(c0v).values)
        return Field(v.grid, c0v.values - cov.apply(self.model.apply(
            Field(v.grid, z))).values)


@dataclass
class MapResult:
    """Outcome of Newton-CG MAP estimation."""

    u_map: Field
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    mean_history: list[Field]


def _cg_m(apply_op, rhs: np.ndarray, mass: MassMatrix, tol: float,
          max_iter: int, record=None) -> tuple[np.ndarray, int]:
    """Conjugate gradients in the M-weighted inner product."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    mr = mass.dot(r)
    rho = float(r @ mr)
    rhs_norm = np.sqrt(max(float(rhs @ mass.dot(rhs)), 1e-300))
    it = 0
    for it in range(1, max_iter + 1):
        ap = apply_op(p)
        alpha = rho / float(p @ mass.dot(ap))
        x += alpha * p
        r -= alpha * ap
        if record is not None:
            record(x)
        mr = mass.dot(r)
        rho_new = float(r @ mr)
        if np.sqrt(max(rho_new, 0.0)) <= tol * rhs_norm:
            break
        p = r + (rho_new / rho) * p
        rho = rho_new
    return x, it


def linear_posterior(
    model: HeatModel,
    prior: SpectralGaussian,
    observations: list[Observation],
    *,
    beta: float | None = None,
    tol: float = 1e-12,
    max_iter: int | None = None,
) -> LinearPosterior:
    """Closed-form Gaussian posterior via a single data-space CG solve.

    The posterior mean is u = f + C0 G z with
    (tau^2/beta + G C0 G) z = mean_j y_j - G f, solved by conjugate
    gradients in the M-inner product; the iterates give the per-iteration
    posterior-mean estimates used by the experiment harness.
    """
    m = len(observations)
    if m == 0:
        raise ValueError("need at least one observation")
    tau = observations[0].tau
    if any(abs(o.tau - tau) > 0 for o in observations):
        raise ValueError("observations must share a noise level")
    if beta is None:
        beta = float(m)
    cov = prior.covariance
    grid = model.grid
    gf = model.apply(prior.mean)
    ybar = np.mean([o.y for o in observations], axis=0)
    rhs = ybar - gf.values
    sigma = tau**2 / beta

    def apply_op(v: np.ndarray) -> np.ndarray:
        gv = model.apply(Field(grid, v))
        return sigma * v + model.apply(cov.apply(gv)).values

    if max_iter is None:
        max_iter = grid.n_nodes

    history: list[Field] = []

    def record(z: np.ndarray) -> None:
        gz = model.apply(Field(grid, z))
        history.append(
            Field(grid, prior.mean.values + cov.apply(gz).values)
        )

    z, iters = _cg_m(apply_op, rhs, model.mass, tol, max_iter, record)

    def solve_data(r: np.ndarray) -> tuple[np.ndarray, int]:
        return _cg_m(apply_op, r, model.mass, tol, max_iter)

    return LinearPosterior(
        prior=prior,
        model=model,
        beta=beta,
        tau=tau,
        n_obs=m,
        mean=history[-1],
        mean_history=history,
        iterations=iters,
        _solve_data=solve_data,
    )


def posterior_trace(
    prior: SpectralGaussian,
    model: HeatModel,
    n_obs: int,
    tau: float,
    beta: float | None = None,
) -> float:
    """Trace of the heat-problem posterior covariance,
    sum_k (beta d_k^2 / tau^2 + 1 / lambda_k^2)^{-1},
    pairing the prior eigenvalues (sorted decreasing) with the heat modes in
    wavenumber order."""
    if beta is None:
        beta = float(n_obs)
    lam2 = prior.covariance.lam2
    k = lam2.shape[0]
    d = model.decay[:k]
    dk = np.zeros(k)
    dk[: d.shape[0]] = d
    return float(np.sum(1.0 / (beta * dk**2 / tau**2 + 1.0 / lam2)))


# ---------------------------------------------------------------------------
# Newton-CG MAP estimation
# ---------------------------------------------------------------------------


def _gauss_newton_hv(model, mset, u, v, beta_over_tau2):
    """Data part of the Gauss-Newton Hessian, as an M-gradient field."""
    if isinstance(model, HeatModel):
        return Field(u.grid, beta_over_tau2 * model.apply(model.apply(v)).values)
    w = model.solve(u)
    wprime = model.linearized(u, w, v)
    z = mset.apply(wprime)
    p = model.adjoint_solve(u, mset.matrix.T @ (beta_over_tau2 * z))
    g_eucl = -model.grad_scatter(u, w, p)
    return Field(u.grid, model.mass.solve(g_eucl))


def map_newton_cg(
    model,
    mset: MeasurementSet,
    prior: SpectralGaussian,
    observations: list[Observation],
    *,
    beta: float | None = None,
    gtol: float = 1e-8,
    max_newton: int = 50,
    max_cg: int = 200,
) -> MapResult:
    """MAP estimation by inexact Newton-CG with a Gauss-Newton Hessian.

    Minimizes J(u) = (beta/m) sum_j Phi(u; y_j) + 1/2 ||u - f||_CM^2 over the
    span of the prior eigenbasis, starting from the prior mean.  Forcing term
    min(0.5, sqrt(||g||)); Armijo backtracking line search.
    """
    m = len(observations)
    if beta is None:
        beta = float(m)
    tau = observations[0].tau
    cov = prior.covariance
    grid = model.grid
    k = cov.n_modes
    beta_over_tau2 = beta / tau**2

    def to_field(a: np.ndarray) -> Field:
        return Field(grid, prior.mean.values + a @ cov.eigvecs)

    def objective_grad(a: np.ndarray) -> tuple[float, np.ndarray]:
        u = to_field(a)
        phi_sum = 0.0
        g = Field(grid, np.zeros(grid.n_nodes))
        for obs in observations:
            phi, gphi = potential_grad_u(model, mset, obs, u)
            phi_sum += phi
            g.values += gphi.values
        j = (beta / m) * phi_sum + 0.5 * float(np.sum(a * a / cov.lam2))
        gc = (beta / m) * cov.coeffs(g) + a / cov.lam2
        return j, gc

    def hessian_vec(a: np.ndarray, va: np.ndarray) -> np.ndarray:
        v = Field(grid, va @ cov.eigvecs)
        hv = _gauss_newton_hv(model, mset, to_field(a), v, beta_over_tau2)
        return cov.coeffs(hv) + va / cov.lam2

    a = np.zeros(k)
    history: list[Field] = []
    j_val, g = objective_grad(a)
    converged = False
    it = 0
    for it in range(1, max_newton + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            converged = True
            it -= 1
            break
        eta = min(0.5, np.sqrt(gnorm))
        # plain Euclidean CG on the coefficient-space Newton system
        da = np.zeros(k)
        r = -g.copy()
        p = r.copy()
        rho = float(r @ r)
        for _ in range(max_cg):
            hp = hessian_vec(a, p)
            curv = float(p @ hp)
            if curv <= 0.0:
                break
            alpha = rho / curv
            da += alpha * p
            r -= alpha * hp
            rho_new = float(r @ r)
            if np.sqrt(rho_new) <= eta * gnorm:
                break
            p = r + (rho_new / rho) * p
            rho = rho_new
        if float(g @ da) >= 0.0:
            da = -g  # fall back to steepest descent
        step = 1.0
        for _ in range(30):
            j_new, g_new = objective_grad(a + step * da)
            if j_new <= j_val + 1e-4 * step * float(g @ da):
                break
            step *= 0.5
        a = a + step * da
        j_val, g = j_new, g_new
        history.append(to_field(a))
    gnorm = float(np.linalg.norm(g))
    if gnorm <= gtol:
        converged = True
    if not history:
        history.append(to_field(a))
    return MapResult(
        u_map=to_field(a),
        objective=j_val,
        grad_norm=gnorm,
        iterations=it,
        converged=converged,
        mean_history=history,
    )
