import numpy as np
import pytest

from priorlearn.forward import (
    DarcyModel,
    HeatModel,
    Observation,
    darcy_solve,
    identity_measurements,
    measure,
    mollified_measurements,
)
from priorlearn.invert import linear_posterior, map_newton_cg, posterior_trace
from priorlearn.measures import SpectralGaussian, build_laplacian_covariance
from priorlearn.space import Field, Grid, MassMatrix


def _heat_problem(n=40, n_modes=None, t=0.02):
    grid = Grid(1, n)
    mass = MassMatrix(grid)
    model = HeatModel(grid, mass, t_final=t)
    cov = build_laplacian_covariance(grid, mass, power=2, n_modes=n_modes)
    prior = SpectralGaussian(
        cov.synth(0.3 * np.ones(cov.n_modes) / np.arange(1, cov.n_modes + 1)),
        cov,
    )
    return grid, mass, model, prior


def _dense_conditioning_oracle(model, prior, observations, beta):
    """Textbook joint-Gaussian conditioning in M-orthonormal coordinates.

    In coordinates a_k = <u, e_k>_M the prior is N(a0, diag(lam2)), the
    forward map is diagonal with the heat decay, and each observation has
    noise covariance (tau^2) I in those coordinates (the data vector is a
    field observed with white-in-M noise).  Tempering beta replaces tau^2
    by m tau^2 / beta for the stacked block system.
    """
    cov = prior.covariance
    k = cov.n_modes
    m = len(observations)
    tau = observations[0].tau
    d = model.decay[:k]
    a0 = cov.coeffs(prior.mean)
    lam2 = cov.lam2
    # stacked observation of a: A = tile(diag(d)), noise (m tau^2/beta) I
    big_a = np.tile(np.diag(d), (m, 1))
    prior_cov = np.diag(lam2)
    obs_cov = (m * tau**2 / beta) * np.eye(m * k) / m
    # y_j in coordinates
    ys = np.concatenate([cov.coeffs(Field(cov.grid, o.y)) for o in observations])
    s = big_a @ prior_cov @ big_a.T + obs_cov * m
    gain = prior_cov @ big_a.T @ np.linalg.solve(s, np.eye(m * k))
    a_post = a0 + gain @ (ys - big_a @ a0)
    cov_post = prior_cov - gain @ big_a @ prior_cov
    return a_post, cov_post


def test_linear_posterior_matches_dense_conditioning():
    rng = np.random.default_rng(17)
    grid, mass, model, prior = _heat_problem(40)
    cov = prior.covariance
    mset = identity_measurements(grid, mass)
    worst_mean = worst_cov = 0.0
    for trial in range(20):
        m = int(rng.integers(1, 4))
        tau = float(rng.uniform(0.05, 0.3))
        beta = float(m)
        truth = Field(grid, rng.standard_normal(grid.n_nodes))
        obs = [
            measure(mset, model.apply(truth), tau, rng) for _ in range(m)
        ]
        post = linear_posterior(model, prior, obs, beta=beta)
        a_post, cov_post = _dense_conditioning_oracle(model, prior, obs, beta)
        mean_coeffs = cov.coeffs(post.mean)
        worst_mean = max(worst_mean, np.abs(mean_coeffs - a_post).max())
        v = cov.synth(rng.standard_normal(cov.n_modes))
        cv = post.apply_covariance(v)
        expected = cov_post @ cov.coeffs(v)
        worst_cov = max(worst_cov, np.abs(cov.coeffs(cv) - expected).max())
    assert worst_mean < 1e-8
    assert worst_cov < 1e-8


def test_posterior_trace_matches_dense_oracle():
    grid, mass, model, prior = _heat_problem(30)
    tau, m, beta = 0.1, 3, 3.0
    obs = [Observation(np.zeros(grid.n_nodes), tau) for _ in range(m)]
    _, cov_post = _dense_conditioning_oracle(model, prior, obs, beta)
    tr = posterior_trace(prior, model, m, tau, beta=beta)
    assert tr == pytest.approx(np.trace(cov_post), rel=1e-10)


def test_posterior_trace_closed_form():
    grid, mass, model, prior = _heat_problem(30)
    lam2 = prior.covariance.lam2
    d = model.decay[: lam2.shape[0]]
    tau, beta = 0.2, 5.0
    expected = np.sum(1.0 / (beta * d**2 / tau**2 + 1.0 / lam2))
    assert posterior_trace(prior, model, 5, tau, beta=beta) == pytest.approx(
        expected, rel=1e-12
    )


def test_map_newton_cg_linear_problem_recovers_posterior_mean():
    rng = np.random.default_rng(3)
    grid, mass, model, prior = _heat_problem(40)
    mset = identity_measurements(grid, mass)
    truth = Field(grid, rng.standard_normal(grid.n_nodes))
    obs = [measure(mset, model.apply(truth), 0.1, rng) for _ in range(2)]
    post = linear_posterior(model, prior, obs)
    res = map_newton_cg(model, mset, prior, obs, gtol=1e-10)
    assert res.converged
    np.testing.assert_allclose(res.u_map.values, post.mean.values, atol=1e-6)


def test_map_newton_cg_darcy_converges_and_improves():
    rng = np.random.default_rng(12)
    grid = Grid(2, 12)
    mass = MassMatrix(grid)
    model = DarcyModel(grid, mass)
    cov = build_laplacian_covariance(
        grid, mass, bc="neumann", shift=0.01, scale=0.1, power=2, n_modes=36
    )
    truth = cov.synth(np.sqrt(cov.lam2) * rng.standard_normal(cov.n_modes))
    prior = SpectralGaussian(Field(grid, np.zeros(grid.n_nodes)), cov)
    pts = rng.uniform(0.1, 0.9, size=(16, 2))
    mset = mollified_measurements(grid, mass, pts)
    w = darcy_solve(model, truth)
    obs = [measure(mset, w, tau=0.01, rng=rng)]
    res = map_newton_cg(model, mset, prior, obs, gtol=1e-8)
    assert res.converged
    assert res.iterations >= 1
    # the MAP fits the data much better than the prior mean does
    r_map = mset.apply(darcy_solve(model, res.u_map)) - obs[0].y
    r_prior = mset.apply(darcy_solve(model, prior.mean)) - obs[0].y
    assert np.linalg.norm(r_map) < 0.5 * np.linalg.norm(r_prior)
    assert len(res.mean_history) == res.iterations
