"""End-to-end acceptance checks.

Each test covers one deliverable-level requirement and prints a single
PASS/FAIL line (run pytest with -s or read captured output) naming the
behavior it verified, including the measured runtime where a budget
applies.  The desk-scale ordering checks retrain the prior variants from
scratch, so this module takes a few hours in total.
"""

import json
import subprocess
import sys
import time

import numpy as np

from priorlearn.bounds import (
    BoundInputs,
    algorithm_bound,
    bound_bounded_indep,
    bound_subgamma,
    bound_subgaussian_dep,
    bound_subgaussian_indep,
    s_params_darcy,
)
from priorlearn.forward import (
    HeatModel,
    Observation,
    identity_measurements,
    measure,
    potential_grad_u,
)
from priorlearn.harness import ExperimentConfig, desk_spec, run_experiment
from priorlearn.hyper import (
    HyperConfig,
    HyperState,
    Task,
    TaskDataset,
    hyper_gradient,
    hyper_objective,
    log_zm_estimate,
)
from priorlearn.invert import linear_posterior
from priorlearn.measures import (
    SpectralGaussian,
    TruncatedGaussian,
    build_laplacian_covariance,
    psi_e_bound,
)
from priorlearn.predictors import FnoPredictor, fno_backward, fno_forward
from priorlearn.space import Field, Grid, MassMatrix, relative_l2_error, resample

from test_forward import _darcy_setup, _fd_check_grad, _heat_setup
from test_hyper import _coeff_state, _tiny_diffusion_dataset
from test_invert import _dense_conditioning_oracle


def _verdict(name: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{tag}] {name}{suffix}")
    assert ok, f"{name}{suffix}"


# ---------------------------------------------------------------------------
# 1. linear posterior against a dense conditioning oracle
# ---------------------------------------------------------------------------


def test_linear_posterior_matches_dense_oracle_many_instances():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        n_modes = int(rng.integers(1, 6))
        grid = Grid(1, int(rng.integers(20, 50)))
        mass = MassMatrix(grid)
        model = HeatModel(grid, mass)
        cov = build_laplacian_covariance(grid, mass, power=2,
                                         n_modes=n_modes)
        prior = SpectralGaussian(
            cov.synth(rng.standard_normal(n_modes)), cov
        )
        mset = identity_measurements(grid, mass)
        m = int(rng.integers(1, 4))
        tau = float(rng.uniform(0.05, 0.4))
        truth = Field(grid, rng.standard_normal(grid.n_nodes))
        obs = [measure(mset, model.apply(truth), tau, rng) for _ in range(m)]
        post = linear_posterior(model, prior, obs, beta=float(m))
        a_post, cov_post = _dense_conditioning_oracle(model, prior, obs,
                                                      float(m))
        mean_coeffs = cov.coeffs(post.mean)
        scale = max(np.abs(a_post).max(), 1e-12)
        worst = max(worst, np.abs(mean_coeffs - a_post).max() / scale)
        v = cov.synth(rng.standard_normal(n_modes))
        expected = cov_post @ cov.coeffs(v)
        got = cov.coeffs(post.apply_covariance(v))
        worst = max(worst,
                    np.abs(got - expected).max()
                    / max(np.abs(expected).max(), 1e-12))
    dt = time.perf_counter() - t0
    _verdict(
        "linear posterior matches dense conditioning oracle",
        worst < 1e-8 and dt < 5.0,
        f"50 instances, worst rel err {worst:.2e}, {dt:.1f}s < 5s",
    )


# ---------------------------------------------------------------------------
# 2. all hand-rolled gradients against central finite differences
# ---------------------------------------------------------------------------


def _fd_vector_check(get_value, vec0, set_vec, grad, rng, n_dirs=10, h=1e-5):
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal(vec0.size)
        d /= np.linalg.norm(d)
        set_vec(vec0 + h * d)
        fp = get_value()
        set_vec(vec0 - h * d)
        fm = get_value()
        set_vec(vec0)
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd - float(grad @ d)) / max(abs(fd), 1e-10))
    return worst


def test_gradients_match_finite_differences():
    t0 = time.perf_counter()
    results = {}

    # potential gradient, heat
    grid, mass, model = _heat_setup(40)
    mset = identity_measurements(grid, mass)
    rng = np.random.default_rng(21)
    u = Field(grid, rng.standard_normal(grid.n_nodes))
    obs = Observation(rng.standard_normal(grid.n_nodes), tau=0.1)
    results["potential heat"] = _fd_check_grad(model, mset, obs, u, mass,
                                               rng, n_dirs=10)

    # potential gradient, darcy
    dgrid, dmass, dmodel, dmset = _darcy_setup(10)
    rng = np.random.default_rng(22)
    du = Field(dgrid, 0.5 * rng.standard_normal(dgrid.n_nodes))
    dobs = Observation(rng.standard_normal(dmset.m), tau=0.05)
    results["potential darcy"] = _fd_check_grad(dmodel, dmset, dobs, du,
                                                dmass, rng, n_dirs=10)

    # FNO backward pass
    pred = FnoPredictor(1, 3, 6)
    pred.init_params(np.random.default_rng(7))
    fgrid = Grid(1, 48)
    rng = np.random.default_rng(8)
    data = Field(fgrid, rng.standard_normal(fgrid.n_nodes))
    cot = rng.standard_normal(fgrid.n_nodes)
    out, cache = fno_forward(pred, data, return_cache=True)
    grads = fno_backward(pred, cache, cot)
    gvec = np.concatenate([grads[k].ravel() for k in pred.param_names()])
    results["fno backward"] = _fd_vector_check(
        lambda: float(fno_forward(pred, data).values @ cot),
        pred.to_vector(), pred.from_vector, gvec, rng, h=1e-6,
    )

    # hyper gradient with and without covariance parameters
    ds = _tiny_diffusion_dataset()
    for label, with_cov in (("hyper gradient", False),
                            ("covariance params", True)):
        cfg = HyperConfig(l_samples=3, batch_size=4, resample_noise=False,
                          seed=3)
        state = _coeff_state(ds, with_cov=with_cov)
        g = hyper_gradient(state, ds, cfg)
        results[label] = _fd_vector_check(
            lambda: hyper_objective(state, ds, cfg),
            state.to_vector(), state.from_vector, g,
            np.random.default_rng(9),
        )

    dt = time.perf_counter() - t0
    worst_label = max(results, key=results.get)
    ok = max(results.values()) < 1e-3 and dt < 120.0
    _verdict(
        "hand-rolled gradients match central finite differences",
        ok,
        f"worst {results[worst_label]:.2e} ({worst_label}), {dt:.1f}s < 120s",
    )


# ---------------------------------------------------------------------------
# 3. Monte-Carlo evidence against the closed-form Gaussian integral
# ---------------------------------------------------------------------------


def test_evidence_estimator_matches_closed_form():
    t0 = time.perf_counter()
    grid = Grid(1, 40)
    mass = MassMatrix(grid)
    model = HeatModel(grid, mass)
    cov = build_laplacian_covariance(grid, mass, power=2, n_modes=2)
    a0 = np.array([0.3, -0.2])
    prior = SpectralGaussian(cov.synth(a0), cov)
    mset = identity_measurements(grid, mass)
    rng = np.random.default_rng(2)
    tau, m, beta = 0.3, 1, 1.0
    truth = cov.synth(np.array([1.0, -0.5]))
    obs = [measure(mset, model.apply(truth), tau, rng) for _ in range(m)]
    task = Task(mset, obs, prior.mean, model, truth)

    # exponent per mode: -(beta/m)/tau^2 (m d^2 a^2 / 2 - d a ysum) against
    # N(a0, lam2); completing the square gives the integral in closed form
    d = model.decay[:2]
    ysum = np.sum([cov.eigvecs @ mass.dot(o.y) for o in obs], axis=0)
    c = (beta / m) / tau**2
    log_z = 0.0
    for k in range(2):
        p = c * m * d[k] ** 2  # quadratic coefficient (precision added)
        q = c * d[k] * ysum[k]  # linear coefficient
        lam2 = cov.lam2[k]
        prec = 1.0 / lam2 + p
        log_z += (
            -0.5 * np.log1p(p * lam2)
            + 0.5 * (a0[k] / lam2 + q) ** 2 / prec
            - 0.5 * a0[k] ** 2 / lam2
        )

    reps = [
        log_zm_estimate(prior, task, beta, 10_000,
                        np.random.default_rng(100 + r))
        for r in range(6)
    ]
    se = np.std(reps, ddof=1) / np.sqrt(len(reps))
    gap = abs(np.mean(reps) - log_z)
    dt = time.perf_counter() - t0
    _verdict(
        "Monte-Carlo evidence matches the closed-form Gaussian integral",
        gap < 3 * se and dt < 30.0,
        f"gap {gap:.2e} < 3*SE {3 * se:.2e}, {dt:.1f}s < 30s",
    )


# ---------------------------------------------------------------------------
# 4. bound formulas: hand oracles, monotonicity, reductions
# ---------------------------------------------------------------------------


def test_bound_formulas_oracles_and_reductions():
    inp = BoundInputs(n=100, m=25, empirical=0.7, kl_hyper=3.0,
                      kl_base_sum=40.0, delta=0.05, log_psi_e=2.0)
    n, m, g, l = 100, 25, 2500.0, 100.0
    ok = True

    expected = (0.7 + (1 / l + 1 / g) * 3.0 + 40.0 / g
                + (g / (8 * n * m) + l / (8 * n)) * 4.0
                + np.log(20.0) / 10.0)
    ok &= abs(bound_bounded_indep(inp, 0.0, 2.0).total - expected) < 1e-12

    expected = (0.7 + (1 / l + 1 / g) * 3.0 + 40.0 / g
                + g * 0.3 / (2 * n * m) + l * 0.9 / (2 * n)
                + np.log(20.0) / 10.0)
    ok &= abs(bound_subgaussian_indep(inp, 0.3, 0.9).total
              - expected) < 1e-12

    # monotone in the KL terms, the variance factors, and the penalty
    def total(**kw):
        fields = dict(n=100, m=25, empirical=0.7, kl_hyper=3.0,
                      kl_base_sum=40.0, delta=0.05, log_psi_e=2.0)
        fields.update(kw)
        return bound_subgaussian_indep(BoundInputs(**fields), 0.3, 0.9).total

    base = total()
    ok &= total(kl_hyper=6.0) > base
    ok &= total(kl_base_sum=80.0) > base
    ok &= total(delta=0.01) > base
    ok &= bound_subgaussian_indep(inp, 0.6, 0.9).total > base
    ok &= bound_subgaussian_indep(inp, 0.3, 1.8).total > base
    dep_lo = bound_subgaussian_dep(inp, 0.3, 0.9).total
    inp_hi = BoundInputs(n=100, m=25, empirical=0.7, kl_hyper=3.0,
                         kl_base_sum=40.0, delta=0.05, log_psi_e=4.0)
    ok &= bound_subgaussian_dep(inp_hi, 0.3, 0.9).total > dep_lo

    # zero sub-Gamma scale parameters give back the sub-Gaussian bound
    for dep in (False, True):
        gi = BoundInputs(n=100, m=25, empirical=0.7, kl_hyper=3.0,
                         kl_base_sum=40.0, delta=0.05, log_psi_e=2.0,
                         gamma=1250.0 if dep else None)
        sg = bound_subgamma(gi, 0.3, 0.9, 0.0, 0.0, dependent=dep)
        ref = (bound_subgaussian_dep(gi, 0.3, 0.9) if dep
               else bound_subgaussian_indep(gi, 0.3, 0.9))
        ok &= abs(sg.total - ref.total) < 1e-12

    der = s_params_darcy(0.0, 1.0, 1.0)
    ok &= abs(der.s1_sq - (100.0 / np.pi**4 + 4.0 / np.pi**2)) < 1e-12
    ok &= abs(der.s2_sq - 400.0 / np.pi**4) < 1e-12

    _verdict("bound formulas reproduce hand oracles and reductions", ok)


# ---------------------------------------------------------------------------
# 5. complex-environment ordering, diffusion desk scale
# ---------------------------------------------------------------------------


def test_complex_diffusion_ordering_two_seeds():
    t0 = time.perf_counter()
    details = []
    ok = True
    for seed in (0, 1):
        cfg = ExperimentConfig(desk_spec("diffusion", "complex", seed=seed),
                               max_itn=10)
        table = run_experiment(cfg)
        dep = table.column("dependent")[-1]
        unl = table.column("unlearned")[-1]
        ind = table.column("independent")[-1]
        ok &= dep < 0.75 * min(unl, ind)
        ok &= abs(unl - ind) < 0.1
        details.append(f"seed {seed}: dep {dep:.3f} vs "
                       f"0.75*min {0.75 * min(unl, ind):.3f}, "
                       f"|unl-ind| {abs(unl - ind):.3f}")
    dt = time.perf_counter() - t0
    ok &= dt < 1800.0
    _verdict(
        "complex diffusion: dependent beats both task-agnostic priors",
        ok,
        "; ".join(details) + f", {dt:.0f}s < 1800s",
    )


# ---------------------------------------------------------------------------
# 6. complex-environment ordering, Darcy desk scale
# ---------------------------------------------------------------------------


def test_complex_darcy_ordering():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(desk_spec("darcy", "complex", seed=0),
                           variants=("unlearned", "dependent"), max_itn=22)
    table = run_experiment(cfg)
    unl = table.column("unlearned")
    dep = table.column("dependent")
    below = np.nonzero(unl < 0.45)[0]
    dt = time.perf_counter() - t0
    if below.size == 0:
        _verdict("complex darcy: dependent beats unlearned at matched budget",
                 False, "unlearned never reached 0.45 relative error")
    i = below[0]
    _verdict(
        "complex darcy: dependent beats unlearned at matched budget",
        dep[i] < 0.5 * unl[i] and dt < 7200.0,
        f"itn {i + 1}: dep {dep[i]:.3f} < 0.5*unl {0.5 * unl[i]:.3f}, "
        f"{dt:.0f}s < 7200s",
    )


# ---------------------------------------------------------------------------
# 7. simple-environment ordering, both problems
# ---------------------------------------------------------------------------


def test_simple_ordering_both_problems_two_seeds():
    details = []
    ok = True
    for problem in ("diffusion", "darcy"):
        for seed in (0, 1):
            cfg = ExperimentConfig(desk_spec(problem, "simple", seed=seed),
                                   max_itn=10)
            table = run_experiment(cfg)
            dep = table.column("dependent")[-1]
            ind = table.column("independent")[-1]
            unl = table.column("unlearned")[-1]
            ok &= dep < ind < unl
            details.append(f"{problem} seed {seed}: "
                           f"{dep:.3f} < {ind:.3f} < {unl:.3f}")
    _verdict(
        "simple environments: dependent < independent < unlearned",
        ok,
        "; ".join(details),
    )


# ---------------------------------------------------------------------------
# 8. neural-operator discretization invariance
# ---------------------------------------------------------------------------


def test_fno_discretization_invariance():
    t0 = time.perf_counter()
    pred = FnoPredictor(1, 5, 12)
    pred.init_params(np.random.default_rng(7))
    g64, g128 = Grid(1, 64), Grid(1, 128)

    def f(x):
        return np.sin(2 * np.pi * x) + 0.5 * np.cos(np.pi * x)

    out64 = fno_forward(pred, Field(g64, f(g64.axis_coords)))
    out128 = fno_forward(pred, Field(g128, f(g128.axis_coords)))
    err = relative_l2_error(resample(out128, g64), out64, MassMatrix(g64))
    dt = time.perf_counter() - t0
    _verdict(
        "neural operator is discretization invariant on band-limited input",
        err < 1e-2 and dt < 10.0,
        f"64 vs 128 nodes rel err {err:.2e}, {dt:.1f}s < 10s",
    )


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------


def _run_cli(*args):
    return subprocess.run([sys.executable, "-m", "priorlearn.cli", *args],
                          capture_output=True, text=True)


def test_cli_repeated_runs_are_bitwise_identical(tmp_path):
    ok = True
    data = [tmp_path / "d1", tmp_path / "d2"]
    for d in data:
        r = _run_cli("gen-data", "--env", "diffusion", "--regime", "simple",
                     "--seed", "3", "--out", str(d),
                     "--n-train", "4", "--n-test", "3")
        ok &= r.returncode == 0
    ok &= ((data[0] / "train.tasks").read_bytes()
           == (data[1] / "train.tasks").read_bytes())
    ok &= ((data[0] / "test.tasks").read_bytes()
           == (data[1] / "test.tasks").read_bytes())

    runs = [tmp_path / "r1", tmp_path / "r2"]
    for out in runs:
        r = _run_cli("invert", "--prior", "unlearned",
                     "--tasks", str(data[0] / "test.tasks"),
                     "--max-itn", "4", "--out", str(out))
        ok &= r.returncode == 0
    csvs = [(out / "results.csv").read_bytes() for out in runs]
    ok &= csvs[0] == csvs[1]
    _verdict("CLI runs with identical config+seed are bitwise identical", ok)


# ---------------------------------------------------------------------------
# 10. data-dependence penalty asymptotics
# ---------------------------------------------------------------------------


def test_psi_penalty_asymptotics_and_lower_bound():
    ok = True
    # the per-measurement penalty (1/2m) ln Psi_E halves when m doubles
    log_zm = np.zeros(10)
    r1 = algorithm_bound(log_zm, 10, 8, 0.0, 0.0, 0.0, log_psi_e=3.0)
    r2 = algorithm_bound(log_zm, 10, 16, 0.0, 0.0, 0.0, log_psi_e=3.0)
    ok &= abs(r2.terms["psi"] - 0.5 * r1.terms["psi"]) < 1e-15

    # psi_e_bound >= 1 on random valid inputs
    rng = np.random.default_rng(0)
    grid = Grid(1, 16)
    mass = MassMatrix(grid)
    worst = np.inf
    for _ in range(100):
        cov = build_laplacian_covariance(
            grid, mass, power=float(rng.uniform(0.5, 3.0)),
            scale=float(rng.uniform(0.01, 1.0)), shift=1.0,
            n_modes=int(rng.integers(2, 8)),
        )
        zero = Field(grid, np.zeros(grid.n_nodes))
        tg = TruncatedGaussian(SpectralGaussian(zero, cov),
                               radius=float(rng.uniform(0.01, 1.0)))
        eps = float(rng.uniform(0.3, 0.99)) / (4.0 * cov.lam2.max())
        worst = min(worst, psi_e_bound(tg, eps))
    ok &= worst >= 1.0
    _verdict(
        "data-dependence penalty halves with m and its factor is >= 1",
        ok,
        f"min psi over 100 draws {worst:.6g}",
    )
