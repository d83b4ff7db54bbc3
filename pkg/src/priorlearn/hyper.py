"""Learning the prior prediction function: MAP estimation of the
hyper-posterior over predictor parameters.

The data term for one task with dataset S = {z_j}_{j=1..m} is the Monte-Carlo
log-evidence

    ln Z_m(S)  ~=  lse_l( -(beta/m) sum_j Phi(u_l; z_j) ) - ln L,
    u_l = mean(S; theta1) + sum_k exp(theta2_k / 2) xi_lk e_k,

and training minimizes

    -(1/(m+1)) sum_i ln Z_m(S_i) + regularizer(theta)

by mini-batch SGD, reparameterizing the prior samples through theta so the
gradient flows into the mean predictor and the covariance spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .forward import MeasurementSet, Observation, potential_grad_u
from .invert import _gauss_newton_hv, linear_posterior, map_newton_cg
from .forward import DarcyModel, HeatModel
from .measures import SpectralCovariance, SpectralGaussian
from .predictors import (
    CoeffMeanPredictor,
    CovarianceParams,
    FnoPredictor,
    covariance_from_params,
    fno_backward,
    fno_forward,
    predict_mean_independent,
)
from .space import Field

__all__ = [
    "Task",
    "TaskDataset",
    "HyperConfig",
    "HyperState",
    "log_zm_estimate",
    "hyper_objective",
    "hyper_gradient",
    "train",
    "hyper_logdensity",
    "estimate_transfer_error",
]


@dataclass
class Task:
    """One inverse task: an observation set (and hidden truth for eval only).

    m_count overrides the effective measurement count m when one Observation
    stacks several scalar measurements (as for the Darcy point data); it
    defaults to len(observations).
    """

    mset: MeasurementSet
    observations: list[Observation]
    input_data: Field
    model: object
    truth: Field | None = None
    m_count: int | None = None

    @property
    def m(self) -> int:
        if self.m_count is not None:
            return self.m_count
        return len(self.observations)


@dataclass
class TaskDataset:
    """A collection of tasks sharing a forward model and base covariance."""

    tasks: list[Task]
    model: object
    template_cov: SpectralCovariance
    kind: str  # "diffusion" | "darcy"

    @property
    def n(self) -> int:
        return len(self.tasks)

    @property
    def m(self) -> int:
        return self.tasks[0].m

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ValueError("a dataset needs at least one task")
        m = self.m
        if any(t.m != m for t in self.tasks):
            raise ValueError("all tasks must share the measurement count m")


@dataclass
class HyperConfig:
    """Training configuration.

    lr_schedule : sequence of (iterations, learning_rate) segments.
    resample_noise : draw fresh reparametrization noise every iteration
        (set False to freeze the noise, e.g. for finite-difference checks).
    n_cov_modes : number of leading covariance eigenvalues to learn
        (0 disables covariance learning).
    """

    l_samples: int = 10
    batch_size: int = 10
    beta: float | None = None
    lr_schedule: tuple = ((1000, 1e-2),)
    seed: int = 0
    kappa: float = 1e-4
    theta2_reg_var: float = 10.0
    resample_noise: bool = True
    n_cov_modes: int = 0
    momentum: float = 0.0
    # rescale any stochastic gradient whose norm exceeds this (None = off);
    # the evidence gradients are heavy-tailed when tau is small
    clip_norm: float | None = None
    # "sgd" (with momentum) or "adam"; adam handles the very different
    # gradient scales across FNO layers far better
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # evidence estimator used during training: "mc" is the Monte-Carlo
    # reparametrization estimator; "linearized" replaces ln Z_m by its
    # Gaussian closed form under a linearization of the forward map (exact
    # for the linear heat model, Gauss-Newton at u = 0 for Darcy).  The
    # linearized form is deterministic, which removes the sampling noise
    # that otherwise drowns the weakly observed components of the mean.
    # "laplace" evaluates ln Z_m at the per-task MAP point (Laplace
    # approximation with the log-determinant treated as constant); its
    # mean-gradient follows from the envelope theorem and pulls the
    # predicted mean toward each task's MAP estimate.  Both closed forms
    # require n_cov_modes == 0.
    evidence: str = "mc"
    # inner MAP solver budget for the "laplace" evidence
    laplace_newton: int = 8
    laplace_cg: int = 50

    def __post_init__(self) -> None:
        if self.l_samples < 1:
            raise ValueError("l_samples must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.evidence not in ("mc", "linearized", "laplace"):
            raise ValueError(f"unknown evidence estimator {self.evidence!r}")


@dataclass
class HyperState:
    """Predictor parameters plus bookkeeping for training."""

    predictor: CoeffMeanPredictor | FnoPredictor
    hyper_cov: SpectralCovariance | None = None  # hyper-prior for CoeffMean
    cov_params: CovarianceParams | None = None
    iteration: int = 0
    history: list = field(default_factory=list)
    diverged: bool = False
    frozen_noise: dict = field(default_factory=dict)

    # -- flat parameter vector ------------------------------------------------

    def to_vector(self) -> np.ndarray:
        if isinstance(self.predictor, CoeffMeanPredictor):
            vec = self.predictor.theta1.copy()
        else:
            vec = self.predictor.to_vector()
        if self.cov_params is not None:
            vec = np.concatenate([vec, self.cov_params.theta2])
        return vec

    def from_vector(self, vec: np.ndarray) -> None:
        if self.cov_params is not None:
            nc = self.cov_params.theta2.shape[0]
            vec, theta2 = vec[:-nc], vec[-nc:]
            self.cov_params = CovarianceParams(theta2.copy())
        if isinstance(self.predictor, CoeffMeanPredictor):
            self.predictor.theta1 = vec.copy()
        else:
            self.predictor.from_vector(vec.copy())


# ---------------------------------------------------------------------------
# evidence estimator
# ---------------------------------------------------------------------------


def _phi_sum_and_grad(model, task: Task, u: Field, *, with_grad: bool):
    phi = 0.0
    g = np.zeros(u.grid.n_nodes) if with_grad else None
    for obs in task.observations:
        if with_grad:
            p, gp = potential_grad_u(model, task.mset, obs, u)
            g += gp.values
        else:
            p, _ = _phi_only(model, task, obs, u)
        phi += p
    return phi, g


def _phi_only(model, task: Task, obs: Observation, u: Field):
    return potential_grad_u(model, task.mset, obs, u)


def log_zm_estimate(
    prior: SpectralGaussian,
    task: Task,
    beta: float,
    l_samples: int,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo estimate of ln Z_m for one task (stable log-sum-exp)."""
    cov = prior.covariance
    m = task.m
    xi = rng.standard_normal((l_samples, cov.n_modes))
    t = np.empty(l_samples)
    lam = np.sqrt(cov.lam2)
    for l in range(l_samples):
        u = Field(cov.grid, prior.mean.values + (xi[l] * lam) @ cov.eigvecs)
        phi, _ = _phi_sum_and_grad(task.model, task, u, with_grad=True)
        t[l] = -(beta / max(m, 1)) * phi
    return float(logsumexp(t) - np.log(l_samples))


# ---------------------------------------------------------------------------
# linearized evidence
# ---------------------------------------------------------------------------


class _LinearizedEvidence:
    """Closed-form Gaussian evidence under a linearized forward map.

    With J the (linearized) forward map and r = y - F(mean), the Gaussian
    integral gives, up to mean-independent constants,

        ln Z_m = -1/2 <r, (tau^2 m / beta + J C0 J*)^{-1} r>,

    with the inner product of the observation space (M-weighted for full-field
    heat data, Euclidean for Darcy point data).  The gradient w.r.t. the mean
    is J* applied to the weighted residual.  For the heat model J = G exactly;
    for Darcy J is frozen at u = 0, a Gauss-Newton approximation that only
    sets the relative weighting of the data components.
    """

    def __init__(self, dataset: TaskDataset, cfg: HyperConfig):
        if cfg.n_cov_modes != 0:
            raise ValueError(
                "linearized evidence does not support covariance learning"
            )
        cov = dataset.template_cov
        grid = cov.grid
        self.beta = cfg.beta if cfg.beta is not None else float(dataset.m)
        self.m = float(dataset.m)
        model = dataset.model
        if isinstance(model, HeatModel):
            n = grid.n_nodes
            eye = np.eye(n)
            g_mat = np.column_stack(
                [model.apply(Field(grid, eye[:, j])).values for j in range(n)]
            )
            self.m_dense = cov.mass.dot(eye)
            c0g = cov.eigvecs.T @ (
                cov.lam2[:, None] * (cov.eigvecs @ (self.m_dense @ g_mat))
            )
            tau2 = dataset.tasks[0].observations[0].tau ** 2
            s_mat = eye * (tau2 * self.m / self.beta) + g_mat @ c0g
            self.g_mat = g_mat
            self.s_inv = np.linalg.inv(s_mat)
            self.kind = "heat"
            return
        if isinstance(model, DarcyModel):
            self.cov = cov
            self.kind = "darcy"
            return
        raise TypeError(f"unknown forward model {type(model).__name__}")

    def _darcy_rows(self, task: Task, mean: Field, w: Field) -> np.ndarray:
        """Rows of J* at the current mean: one adjoint solve per data point."""
        model = task.model
        mset = task.mset
        rows = np.empty((mset.m, mean.grid.n_nodes))
        for j in range(mset.m):
            p = model.adjoint_solve(mean, mset.matrix[j])
            rows[j] = self.cov.mass.solve(-model.grad_scatter(mean, w, p))
        return rows

    def log_zm_and_grad(self, task: Task, mean: Field):
        """ln Z_m (up to a mean-independent constant) and its mean-gradient."""
        obs = task.observations[0]
        if self.kind == "heat":
            r = obs.y - self.g_mat @ mean.values
            sr = self.s_inv @ r
            log_zm = -0.5 * float(r @ (self.m_dense @ sr))
            g_mean = self.g_mat @ sr  # heat G is M-self-adjoint
            return log_zm, Field(mean.grid, g_mean)
        model = task.model
        w = model.solve(mean)
        r = obs.y - task.mset.apply(w)
        tau2 = obs.tau**2
        # relinearize J at the current mean (Gauss-Newton): the frozen-J
        # weighting is badly wrong at the amplitudes the truths reach
        rows = self._darcy_rows(task, mean, w)
        cov = self.cov
        proj = cov.eigvecs @ cov.mass.dot(rows.T)  # (modes, m_obs)
        a_mat = proj.T @ (cov.lam2[:, None] * proj)  # J C0 J*
        w_mat = a_mat + np.eye(a_mat.shape[0]) * (tau2 * self.m / self.beta)
        z = np.linalg.solve(w_mat, r)
        log_zm = -0.5 * float(r @ z)
        return log_zm, Field(mean.grid, rows.T @ z)


class _LaplaceEvidence:
    """Laplace approximation of the evidence at the per-task MAP point.

    ln Z_m ~ -min_u [(beta/m) sum_j Phi(u; y_j) + 1/2 ||u - mean||_C^2] up
    to a mean-independent constant (the Gauss-Newton log-determinant at the
    optimum is treated as constant).  The inner point is parameterized as
    u = mean + (coefficients in the prior eigenbasis), so the exponent
    depends on the mean explicitly only through the data term, and the
    envelope theorem gives the mean-gradient -(beta/m) sum_j Phi'(u*)
    without differentiating through the inner solve.
    """

    def __init__(self, dataset: TaskDataset, cfg: HyperConfig):
        if cfg.n_cov_modes != 0:
            raise ValueError(
                "laplace evidence does not support covariance learning"
            )
        self.cov = dataset.template_cov
        self.beta = cfg.beta if cfg.beta is not None else float(dataset.m)
        self.m = float(max(dataset.m, 1))
        self.max_newton = cfg.laplace_newton
        self.max_cg = cfg.laplace_cg

    def log_zm_and_grad(self, task: Task, mean: Field):
        cov = self.cov
        # map_newton_cg tempers by (beta_arg / len(observations)); rescale so
        # the exponent matches (beta/m) sum_j Phi regardless of how the m
        # measurements are packed into Observation entries
        beta_arg = self.beta * len(task.observations) / self.m
        res = map_newton_cg(
            task.model, task.mset, SpectralGaussian(mean, cov),
            task.observations, beta=beta_arg, gtol=1e-7,
            max_newton=self.max_newton, max_cg=self.max_cg,
        )
        _, phi_grad = _phi_sum_and_grad(task.model, task, res.u_map,
                                        with_grad=True)
        g = -(self.beta / self.m) * phi_grad
        return -res.objective, Field(cov.grid, g)


_EVIDENCE_CLASSES = {"linearized": _LinearizedEvidence,
                     "laplace": _LaplaceEvidence}


def _linearized_for(state: HyperState, dataset: TaskDataset, cfg: HyperConfig):
    key = (cfg.evidence, cfg.beta, cfg.n_cov_modes,
           cfg.laplace_newton, cfg.laplace_cg)
    cache = getattr(dataset, "_lin_evidence", None)
    if cache is None or cache[0] != key:
        cls = _EVIDENCE_CLASSES[cfg.evidence]
        dataset._lin_evidence = (key, cls(dataset, cfg))
    return dataset._lin_evidence[1]


# ---------------------------------------------------------------------------
# objective / gradient
# ---------------------------------------------------------------------------


def _effective_cov(state: HyperState, dataset: TaskDataset) -> SpectralCovariance:
    if state.cov_params is None:
        return dataset.template_cov
    return covariance_from_params(state.cov_params, dataset.template_cov)


def _task_mean(state: HyperState, task: Task, *, with_cache: bool):
    if isinstance(state.predictor, CoeffMeanPredictor):
        return predict_mean_independent(state.predictor), None
    if with_cache:
        return fno_forward(state.predictor, task.input_data, return_cache=True)
    return fno_forward(state.predictor, task.input_data), None


def _noise_for(state: HyperState, cfg: HyperConfig, idx: int, k: int):
    if idx not in state.frozen_noise:
        rng = np.random.default_rng((cfg.seed, idx))
        state.frozen_noise[idx] = rng.standard_normal((cfg.l_samples, k))
    return state.frozen_noise[idx]


def _task_log_zm_and_grads(
    state: HyperState,
    dataset: TaskDataset,
    cfg: HyperConfig,
    idx: int,
    xi: np.ndarray,
    *,
    with_grad: bool,
):
    """ln Z_m for one task, plus d/d(mean) (M-gradient field) and d/d(theta2)."""
    task = dataset.tasks[idx]
    cov = _effective_cov(state, dataset)
    m = max(dataset.m, 1)
    beta = cfg.beta if cfg.beta is not None else float(dataset.m)
    mean, cache = _task_mean(state, task, with_cache=with_grad)
    lam = np.sqrt(cov.lam2)
    ll = xi.shape[0]
    t = np.empty(ll)
    grads = []
    for l in range(ll):
        u = Field(cov.grid, mean.values + (xi[l] * lam) @ cov.eigvecs)
        phi, g = _phi_sum_and_grad(task.model, task, u, with_grad=True)
        t[l] = -(beta / m) * phi
        if with_grad:
            grads.append(g)
    log_zm = float(logsumexp(t) - np.log(ll))
    if not with_grad:
        return log_zm, None, None, None
    p = softmax(t)
    g_mean = -(beta / m) * np.einsum("l,ln->n", p, np.asarray(grads))
    d_theta2 = None
    if state.cov_params is not None:
        nc = state.cov_params.theta2.shape[0]
        # <grad_l, e_k>_M for the learned modes
        proj = cov.eigvecs[:nc] @ cov.mass.dot(np.asarray(grads).T)  # (nc, L)
        d_theta2 = -(beta / m) * 0.5 * lam[:nc] * np.einsum(
            "l,kl,lk->k", p, proj, xi[:, :nc]
        )
    return log_zm, Field(cov.grid, g_mean), d_theta2, cache


def _regularizer(state: HyperState, dataset: TaskDataset, cfg: HyperConfig):
    """Value and flat gradient of the parameter regularizer."""
    grads = []
    val = 0.0
    if isinstance(state.predictor, CoeffMeanPredictor):
        h = state.hyper_cov.lam2 if state.hyper_cov is not None else np.ones(
            state.predictor.theta1.shape[0]
        )
        val += 0.5 * float(np.sum(state.predictor.theta1**2 / h))
        grads.append(state.predictor.theta1 / h)
    else:
        vec = state.predictor.to_vector()
        val += 0.5 * cfg.kappa * float(vec @ vec)
        grads.append(cfg.kappa * vec)
    if state.cov_params is not None:
        nc = state.cov_params.theta2.shape[0]
        center = np.log(dataset.template_cov.lam2[:nc])
        diff = state.cov_params.theta2 - center
        val += 0.5 * float(diff @ diff) / cfg.theta2_reg_var
        grads.append(diff / cfg.theta2_reg_var)
    return val, np.concatenate(grads)


def _chain_mean_grad(
    state: HyperState, g_mean: Field, cache, cov: SpectralCovariance
) -> np.ndarray:
    """Pull an M-gradient w.r.t. the predicted mean back to the parameters."""
    if isinstance(state.predictor, CoeffMeanPredictor):
        basis = state.predictor.basis
        return basis.eigvecs @ basis.mass.dot(g_mean.values)
    cot = cov.mass.dot(g_mean.values)  # Euclidean cotangent pairing
    gdict = fno_backward(state.predictor, cache, cot)
    return np.concatenate(
        [gdict[k].ravel() for k in state.predictor.param_names()]
    )


def hyper_objective(
    state: HyperState, dataset: TaskDataset, cfg: HyperConfig
) -> float:
    """Full-batch MAP objective with the state's frozen noise."""
    cov = _effective_cov(state, dataset)
    lin = (
        _linearized_for(state, dataset, cfg)
        if cfg.evidence in _EVIDENCE_CLASSES
        else None
    )
    total = 0.0
    for i in range(dataset.n):
        if lin is not None:
            mean, _ = _task_mean(state, dataset.tasks[i], with_cache=False)
            log_zm, _ = lin.log_zm_and_grad(dataset.tasks[i], mean)
        else:
            xi = _noise_for(state, cfg, i, dataset.template_cov.n_modes)
            log_zm, _, _, _ = _task_log_zm_and_grads(
                state, dataset, cfg, i, xi, with_grad=False
            )
        total += log_zm
    reg, _ = _regularizer(state, dataset, cfg)
    return -total / (dataset.m + 1.0) + reg


def hyper_gradient(
    state: HyperState,
    dataset: TaskDataset,
    cfg: HyperConfig,
    batch: list[int] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Flat parameter gradient of the (mini-batch) objective.

    With batch=None the full dataset is used.  Fresh reparametrization noise
    is drawn from rng when given and cfg.resample_noise is set; otherwise the
    state's frozen noise is used (deterministic per task and seed).
    """
    grad, _ = _gradient_and_value(state, dataset, cfg, batch, rng)
    return grad


def _gradient_and_value(state, dataset, cfg, batch, rng):
    if batch is None:
        batch = list(range(dataset.n))
    cov = _effective_cov(state, dataset)
    k = dataset.template_cov.n_modes
    scale = dataset.n / ((dataset.m + 1.0) * len(batch))
    mean_part = None
    theta2_part = (
        np.zeros(state.cov_params.theta2.shape[0])
        if state.cov_params is not None
        else None
    )
    lin = (
        _linearized_for(state, dataset, cfg)
        if cfg.evidence in _EVIDENCE_CLASSES
        else None
    )
    data_term = 0.0
    for i in batch:
        if lin is not None:
            mean, cache = _task_mean(state, dataset.tasks[i], with_cache=True)
            log_zm, g_mean = lin.log_zm_and_grad(dataset.tasks[i], mean)
            d_theta2 = None
        else:
            if cfg.resample_noise and rng is not None:
                xi = rng.standard_normal((cfg.l_samples, k))
            else:
                xi = _noise_for(state, cfg, i, k)
            log_zm, g_mean, d_theta2, cache = _task_log_zm_and_grads(
                state, dataset, cfg, i, xi, with_grad=True
            )
        data_term += log_zm
        g_par = _chain_mean_grad(state, g_mean, cache, cov)
        mean_part = g_par if mean_part is None else mean_part + g_par
        if theta2_part is not None:
            theta2_part += d_theta2
    pieces = [-scale * mean_part]
    if theta2_part is not None:
        pieces.append(-scale * theta2_part)
    reg_val, reg_grad = _regularizer(state, dataset, cfg)
    grad = np.concatenate(pieces) + reg_grad
    value = -scale * data_term + reg_val
    return grad, value


def train(
    state: HyperState, dataset: TaskDataset, cfg: HyperConfig
) -> HyperState:
    """Mini-batch SGD over the MAP objective; deterministic given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    velocity = np.zeros_like(state.to_vector())
    adam_m = np.zeros_like(velocity)
    adam_v = np.zeros_like(velocity)
    order: list[int] = []
    h = min(cfg.batch_size, dataset.n)
    for seg_iters, lr in cfg.lr_schedule:
        for _ in range(seg_iters):
            if len(order) < h:
                order = list(rng.permutation(dataset.n))
            batch, order = order[:h], order[h:]
            noise_rng = rng if cfg.resample_noise else None
            try:
                grad, value = _gradient_and_value(
                    state, dataset, cfg, batch, noise_rng
                )
            except (RuntimeError, FloatingPointError, ValueError):
                # e.g. a singular forward solve after the parameters blew up
                state.diverged = True
                return state
            if not np.isfinite(value) or not np.all(np.isfinite(grad)) \
                    or value > 1e12:
                state.diverged = True
                return state
            if cfg.clip_norm is not None:
                gn = float(np.linalg.norm(grad))
                if gn > cfg.clip_norm:
                    grad = grad * (cfg.clip_norm / gn)
            if cfg.optimizer == "adam":
                t = state.iteration + 1
                adam_m = cfg.adam_beta1 * adam_m + (1 - cfg.adam_beta1) * grad
                adam_v = cfg.adam_beta2 * adam_v + (1 - cfg.adam_beta2) * grad**2
                mhat = adam_m / (1 - cfg.adam_beta1**t)
                vhat = adam_v / (1 - cfg.adam_beta2**t)
                step = -lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            else:
                velocity = cfg.momentum * velocity - lr * grad
                step = velocity
            state.from_vector(state.to_vector() + step)
            state.iteration += 1
            state.history.append(value)
    return state


def hyper_logdensity(
    state: HyperState, dataset: TaskDataset, cfg: HyperConfig
) -> float:
    """Unnormalized log hyper-posterior density (1/(m+1)) sum_i ln Z_m."""
    total = 0.0
    for i in range(dataset.n):
        xi = _noise_for(state, cfg, i, dataset.template_cov.n_modes)
        log_zm, _, _, _ = _task_log_zm_and_grads(
            state, dataset, cfg, i, xi, with_grad=False
        )
        total += log_zm
    return total / (dataset.m + 1.0)


# ---------------------------------------------------------------------------
# transfer-error estimate
# ---------------------------------------------------------------------------


def estimate_transfer_error(
    state: HyperState,
    heldout: TaskDataset,
    cfg: HyperConfig,
    rng: np.random.Generator | None = None,
    n_laplace_modes: int = 20,
) -> float:
    """Average Gibbs loss E_{u ~ base posterior}[mean_j Phi(u; z_j)] over the
    held-out tasks.

    Linear (heat) tasks use the closed-form Gaussian posterior with an exact
    trace correction; Darcy tasks use the MAP point plus Laplace samples
    restricted to the leading prior eigenmodes (an approximation).
    """
    if heldout.n == 0:
        raise ValueError("no held-out tasks")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    cov = _effective_cov(state, heldout)
    beta = cfg.beta if cfg.beta is not None else float(heldout.m)
    total = 0.0
    for task in heldout.tasks:
        mean, _ = _task_mean(state, task, with_cache=False)
        prior = SpectralGaussian(mean, cov)
        m = task.m
        tau = task.observations[0].tau
        if isinstance(heldout.model, HeatModel):
            post = linear_posterior(heldout.model, prior, task.observations,
                                    beta=beta)
            phis = [
                potential_grad_u(heldout.model, task.mset, o, post.mean)[0]
                for o in task.observations
            ]
            d = heldout.model.decay[: cov.n_modes]
            dk = np.zeros(cov.n_modes)
            dk[: d.shape[0]] = d
            c_post = 1.0 / (beta * dk**2 / tau**2 + 1.0 / cov.lam2)
            correction = 0.5 * float(np.sum(dk**2 * c_post)) / tau**2
            total += float(np.mean(phis)) + correction
        else:
            res = map_newton_cg(
                heldout.model, task.mset, prior, task.observations, beta=beta
            )
            kl = min(n_laplace_modes, cov.n_modes)
            var = np.empty(kl)
            for k in range(kl):
                ek = Field(cov.grid, cov.eigvecs[k])
                hv = _gauss_newton_hv(
                    heldout.model, task.mset, res.u_map, ek, beta / tau**2
                )
                var[k] = 1.0 / (
                    float(ek.values @ cov.mass.dot(hv.values))
                    + 1.0 / cov.lam2[k]
                )
            vals = []
            for _ in range(cfg.l_samples):
                a = np.sqrt(var) * rng.standard_normal(kl)
                u = Field(cov.grid, res.u_map.values + a @ cov.eigvecs[:kl])
                phi, _ = _phi_sum_and_grad(heldout.model, task, u,
                                           with_grad=True)
                vals.append(phi / m)
            total += float(np.mean(vals))
    return total / heldout.n
