"""Desk-scale experiment harness.

Builds task corpora for the two benchmark environments (backward diffusion
in 1D, Darcy flow in 2D), trains the three prior variants (unlearned,
task-independent coefficient mean, task-dependent neural-operator mean),
runs the inversions on held-out tasks, and emits deterministic result
tables.  Everything is seeded: the same config and seed reproduce every
byte of the report.

Data are always generated on a finer grid than the learning grid and then
restricted, so the inversions never see the discretization that produced
the data.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .forward import (
    DarcyModel,
    HeatModel,
    Observation,
    darcy_solve,
    identity_measurements,
    mollified_measurements,
)
from .hyper import (
    HyperConfig,
    HyperState,
    Task,
    TaskDataset,
    train,
)
from .invert import linear_posterior, map_newton_cg
from .measures import (
    SpectralCovariance,
    SpectralGaussian,
    build_laplacian_covariance,
)
from .predictors import (
    CoeffMeanPredictor,
    CovarianceParams,
    FnoPredictor,
    covariance_from_params,
    fno_forward,
    predict_mean_independent,
)
from .space import Field, Grid, MassMatrix, relative_l2_error, resample

__all__ = [
    "EnvironmentSpec",
    "Environment",
    "ExperimentConfig",
    "ResultsTable",
    "desk_spec",
    "make_environment",
    "generate_tasks",
    "build_dataset",
    "default_train_config",
    "train_variant",
    "prior_factory",
    "evaluate_variant",
    "run_experiment",
    "emit_report",
    "save_checkpoint",
    "load_checkpoint",
    "state_to_checkpoint",
    "state_from_checkpoint",
    "save_tasks",
    "load_tasks",
]

VARIANTS = ("unlearned", "independent", "dependent")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvironmentSpec:
    """Which environment to build and at what size.

    learning_nodes / data_nodes are nodes per axis; data are generated on
    the finer data grid and restricted to the learning grid.
    """

    problem: str  # "diffusion" | "darcy"
    regime: str  # "simple" | "complex"
    n_train: int
    n_test: int
    learning_nodes: int
    data_nodes: int
    m_points: int = 36  # darcy only: number of local-average observations
    seed: int = 0

    def __post_init__(self) -> None:
        if self.problem not in ("diffusion", "darcy"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.regime not in ("simple", "complex"):
            raise ValueError(f"unknown regime {self.regime!r}")


def desk_spec(problem: str, regime: str, *, seed: int = 0,
              n_train: int | None = None,
              n_test: int | None = None) -> EnvironmentSpec:
    """Default desk-scale sizes for the two environments."""
    if problem == "diffusion":
        return EnvironmentSpec(
            problem, regime,
            n_train=200 if n_train is None else n_train,
            n_test=40 if n_test is None else n_test,
            learning_nodes=100, data_nodes=300, seed=seed,
        )
    return EnvironmentSpec(
        problem, regime,
        n_train=300 if n_train is None else n_train,
        n_test=40 if n_test is None else n_test,
        learning_nodes=24, data_nodes=48, m_points=36, seed=seed,
    )


@dataclass
class Environment:
    """Grids, models and reference measures shared by all tasks of a spec."""

    spec: EnvironmentSpec
    grid: Grid
    mass: MassMatrix
    model: object
    template_cov: SpectralCovariance  # base prior covariance
    hyper_cov: SpectralCovariance  # coefficient-mean hyper-prior
    data_grid: Grid
    data_mass: MassMatrix
    data_model: object
    points: np.ndarray | None = None  # darcy measurement locations
    mset: object = None  # learning-grid measurement set
    data_mset: object = None  # data-grid measurement set


def make_environment(spec: EnvironmentSpec) -> Environment:
    dim = 1 if spec.problem == "diffusion" else 2
    grid = Grid(dim, spec.learning_nodes)
    mass = MassMatrix(grid)
    data_grid = Grid(dim, spec.data_nodes)
    data_mass = MassMatrix(data_grid)
    # base prior covariance (Id + 0.01 * (-Laplacian))^{-2}, Neumann
    template = build_laplacian_covariance(
        grid, mass, bc="neumann", shift=1.0, scale=0.01, power=2.0
    )
    if spec.problem == "diffusion":
        model = HeatModel(grid, mass)
        data_model = HeatModel(data_grid, data_mass)
        hyper_cov = build_laplacian_covariance(
            grid, mass, bc="dirichlet", shift=0.0, scale=0.01, power=4.0
        )
        mset = identity_measurements(grid, mass)
        return Environment(spec, grid, mass, model, template, hyper_cov,
                           data_grid, data_mass, data_model, mset=mset)
    model = DarcyModel(grid, mass)
    data_model = DarcyModel(data_grid, data_mass)
    hyper_cov = build_laplacian_covariance(
        grid, mass, bc="neumann", shift=0.01, scale=0.1, power=2.0
    )
    rng = np.random.default_rng((spec.seed, 101))
    points = rng.uniform(0.1, 0.9, size=(spec.m_points, 2))
    # one physical mollifier width on both grids, so the data-generation
    # and inversion observation operators agree
    delta = 2.0 * data_grid.h
    mset = mollified_measurements(grid, mass, points, delta=delta)
    data_mset = mollified_measurements(data_grid, data_mass, points,
                                       delta=delta)
    return Environment(spec, grid, mass, model, template, hyper_cov,
                       data_grid, data_mass, data_model, points=points,
                       mset=mset, data_mset=data_mset)


# ---------------------------------------------------------------------------
# ground-truth generators
# ---------------------------------------------------------------------------


def _diffusion_truth(rng: np.random.Generator, regime: str,
                     grid: Grid) -> Field:
    """Localized oscillatory profile; the complex regime flips its sign."""
    b_slope = rng.normal(0.5, np.sqrt(0.5))
    a = rng.uniform(5.0, 15.0)
    b = rng.uniform(0.0, 0.1)
    c = rng.normal(4.0, 1.0)
    sign = 1.0
    if regime == "complex":
        sign = 2.0 * float(rng.integers(0, 2)) - 1.0
    x = grid.axis_coords
    vals = (5.0 * b_slope * x + a * np.sin(2.0 * (5.0 * x - b)) + c)
    vals = sign * vals * np.exp(-20.0 * (x - 0.5) ** 2)
    return Field(grid, vals)


def _darcy_truth(rng: np.random.Generator, regime: str, grid: Grid) -> Field:
    """Sum of three anisotropic bumps; the complex regime flips the sign."""
    centers = (
        (rng.uniform(0.15, 0.25), rng.uniform(0.65, 0.75)),
        (rng.uniform(0.45, 0.55), rng.uniform(0.45, 0.55)),
        (rng.uniform(0.65, 0.75), rng.uniform(0.15, 0.25)),
    )
    xy = grid.coords()
    x1, x2 = xy[:, 0], xy[:, 1]
    vals = np.zeros(grid.n_nodes)
    for cx, cy in centers:
        a1 = rng.uniform(0.1, 0.5)
        a2 = rng.uniform(0.1, 0.5)
        a3 = rng.uniform(3.0, 4.0)
        a4 = rng.uniform(30.0, 35.0)
        a6 = rng.uniform(30.0, 35.0)
        vals += (a3 * (1.0 - x1**2) ** a1 * (1.0 - x2**2) ** a2
                 * np.exp(-a4 * (x1 - cx) ** 2 - a6 * (x2 - cy) ** 2))
    if regime == "complex":
        vals *= 2.0 * float(rng.integers(0, 2)) - 1.0
    return Field(grid, vals)


def generate_tasks(env: Environment, n: int, seed: int) -> list[Task]:
    """Draw n tasks; data live on the fine grid, tasks on the learning grid."""
    spec = env.spec
    rng = np.random.default_rng((seed, 202))
    tasks: list[Task] = []
    for _ in range(n):
        if spec.problem == "diffusion":
            truth = _diffusion_truth(rng, spec.regime, env.data_grid)
            clean = env.data_model.apply(truth)
            tau = 0.1
            noisy = clean.values + tau * rng.standard_normal(clean.values.shape)
            data_field = resample(Field(env.data_grid, noisy), env.grid)
            obs = Observation(data_field.values.copy(), tau)
            tasks.append(Task(
                mset=env.mset,
                observations=[obs],
                input_data=data_field,
                model=env.model,
                truth=resample(truth, env.grid),
            ))
        else:
            truth = _darcy_truth(rng, spec.regime, env.data_grid)
            w = darcy_solve(env.data_model, truth)
            y_clean = env.data_mset.apply(w)
            level = 0.01 if spec.regime == "simple" else 0.1
            # "noise level" bounds the noise vector norm, so the
            # per-component std carries a 1/sqrt(m) factor
            tau = (level * float(np.max(np.abs(y_clean)))
                   / np.sqrt(spec.m_points))
            y = y_clean + tau * rng.standard_normal(y_clean.shape)
            tasks.append(Task(
                mset=env.mset,
                observations=[Observation(y, tau)],
                input_data=env.mset.lift(y),
                model=env.model,
                truth=resample(truth, env.grid),
                m_count=spec.m_points,
            ))
    return tasks


def build_dataset(env: Environment, n: int, seed: int) -> TaskDataset:
    kind = env.spec.problem
    return TaskDataset(generate_tasks(env, n, seed), env.model,
                       env.template_cov, kind)


# ---------------------------------------------------------------------------
# training the prior variants
# ---------------------------------------------------------------------------

FNO_WIDTH = {"diffusion": 5, "darcy": 12}
FNO_MODES = 12
N_COV_MODES_DARCY = 45
# The coefficient-mean hyper-prior variances decay fast (k^{-8} for the
# diffusion choice), so only the leading modes are learnable; truncating the
# mean basis keeps the regularizer curvature within SGD's stability range.
N_MEAN_MODES = {"diffusion": 10, "darcy": 45}


def _truncate_cov(cov: SpectralCovariance, k: int) -> SpectralCovariance:
    k = min(k, cov.n_modes)
    return SpectralCovariance(cov.grid, cov.mass, cov.eigvecs[:k],
                              cov.lam2[:k], cov.bc)


def default_train_config(problem: str, variant: str,
                         seed: int = 0) -> HyperConfig:
    """Desk-scale training budgets for each environment/variant pair.

    Both problems train against the linearized evidence with Adam: the
    Monte-Carlo estimator's sampling noise drowns the weakly observed
    components of the mean at these task counts.  beta trades off how
    strongly the weakly observed data directions are weighted; the values
    below were tuned on held-out seeds.
    """
    if problem == "diffusion":
        return HyperConfig(batch_size=10,
                           lr_schedule=((2000, 1e-3), (1000, 1e-4)),
                           seed=seed, optimizer="adam",
                           evidence="linearized", beta=10.0)
    return HyperConfig(batch_size=10,
                       lr_schedule=((3000, 1e-3), (2000, 3e-4)),
                       seed=seed, optimizer="adam",
                       evidence="linearized", beta=0.36)


def _initial_state(env: Environment, variant: str,
                   cfg: HyperConfig) -> HyperState:
    cov_params = None
    if cfg.n_cov_modes > 0:
        theta2 = np.log(env.template_cov.lam2[: cfg.n_cov_modes]).copy()
        cov_params = CovarianceParams(theta2)
    if variant == "independent":
        basis = _truncate_cov(env.hyper_cov, N_MEAN_MODES[env.spec.problem])
        predictor = CoeffMeanPredictor(basis, np.zeros(basis.n_modes))
        return HyperState(predictor, hyper_cov=basis, cov_params=cov_params)
    predictor = FnoPredictor(env.grid.dimension,
                             FNO_WIDTH[env.spec.problem], FNO_MODES)
    predictor.init_params(np.random.default_rng((cfg.seed, 303)))
    return HyperState(predictor, cov_params=cov_params)


def train_variant(env: Environment, dataset: TaskDataset, variant: str,
                  cfg: HyperConfig | None = None) -> HyperState | None:
    """Train a prior variant on the dataset; None for the unlearned prior."""
    if variant == "unlearned":
        return None
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if cfg is None:
        cfg = default_train_config(env.spec.problem, variant, env.spec.seed)
    state = _initial_state(env, variant, cfg)
    state = train(state, dataset, cfg)
    if state.diverged:
        raise FloatingPointError(
            f"training diverged for variant {variant!r}")
    return state


def prior_factory(env: Environment, state: HyperState | None):
    """A callable task -> SpectralGaussian for the given trained state."""
    zero = Field(env.grid, np.zeros(env.grid.n_nodes))

    def make_prior(task: Task) -> SpectralGaussian:
        if state is None:
            return SpectralGaussian(zero, env.template_cov)
        cov = env.template_cov
        if state.cov_params is not None:
            cov = covariance_from_params(state.cov_params, cov)
        if isinstance(state.predictor, CoeffMeanPredictor):
            mean = predict_mean_independent(state.predictor)
        else:
            mean = fno_forward(state.predictor, task.input_data)
        return SpectralGaussian(mean, cov)

    return make_prior


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _error_curve(env: Environment, task: Task, prior: SpectralGaussian,
                 max_itn: int) -> np.ndarray:
    """Relative L2 error of the posterior-mean iterates, padded to max_itn.

    The iteration count is CG iterations for the linear (diffusion) solve
    and Newton iterations for the Darcy MAP estimate.
    """
    if env.spec.problem == "diffusion":
        post = linear_posterior(env.model, prior, task.observations,
                                max_iter=max_itn)
        history = post.mean_history
    else:
        res = map_newton_cg(env.model, task.mset, prior, task.observations,
                            max_newton=max_itn, max_cg=200)
        history = res.mean_history
    errs = np.empty(max_itn)
    last = relative_l2_error(prior.mean, task.truth, env.mass)
    for i in range(max_itn):
        if i < len(history):
            last = relative_l2_error(history[i], task.truth, env.mass)
        errs[i] = last
    return errs


def evaluate_variant(env: Environment, test: TaskDataset,
                     state: HyperState | None, max_itn: int) -> np.ndarray:
    """Mean relative error per iteration count over the test tasks."""
    make_prior = prior_factory(env, state)
    curves = [
        _error_curve(env, task, make_prior(task), max_itn)
        for task in test.tasks
    ]
    return np.mean(curves, axis=0)


# ---------------------------------------------------------------------------
# experiments and reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    spec: EnvironmentSpec
    variants: tuple = VARIANTS
    max_itn: int = 10
    train_configs: dict = field(default_factory=dict)  # variant -> HyperConfig


@dataclass
class ResultsTable:
    """Mean relative error per iteration count, one column per variant."""

    itn: list[int]
    errors: dict  # variant -> list[float]
    config: dict

    def column(self, variant: str) -> np.ndarray:
        return np.asarray(self.errors[variant])

    def to_csv(self) -> str:
        variants = list(self.errors.keys())
        lines = ["itn," + ",".join(variants)]
        for i, it in enumerate(self.itn):
            row = [str(it)]
            row += [format(self.errors[v][i], ".17g") for v in variants]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {"config": self.config, "itn": self.itn,
                   "errors": self.errors}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def run_experiment(cfg: ExperimentConfig) -> ResultsTable:
    env = make_environment(cfg.spec)
    train_ds = build_dataset(env, cfg.spec.n_train, cfg.spec.seed)
    test_ds = build_dataset(env, cfg.spec.n_test, cfg.spec.seed + 1)
    errors = {}
    for variant in cfg.variants:
        state = train_variant(env, train_ds, variant,
                              cfg.train_configs.get(variant))
        errors[variant] = [
            float(e) for e in evaluate_variant(env, test_ds, state,
                                               cfg.max_itn)
        ]
    return ResultsTable(
        itn=list(range(1, cfg.max_itn + 1)),
        errors=errors,
        config={"spec": dataclasses.asdict(cfg.spec),
                "variants": list(cfg.variants), "max_itn": cfg.max_itn},
    )


def emit_report(table: ResultsTable, out_dir: str,
                formats: tuple = ("csv", "json")) -> list[str]:
    """Write results to out_dir deterministically; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if "csv" in formats:
        path = os.path.join(out_dir, "results.csv")
        with open(path, "w", newline="\n") as fh:
            fh.write(table.to_csv())
        paths.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "results.json")
        with open(path, "w", newline="\n") as fh:
            fh.write(table.to_json())
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest line + named float64 sections
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, meta: dict, sections: dict) -> None:
    manifest = {
        "meta": meta,
        "sections": [
            {"name": k, "shape": list(np.asarray(v).shape)}
            for k, v in sections.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for k in sections:
            arr = np.ascontiguousarray(np.asarray(sections[k], dtype=float))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode())
        sections = {}
        for sec in manifest["sections"]:
            count = int(np.prod(sec["shape"])) if sec["shape"] else 1
            buf = fh.read(8 * count)
            sections[sec["name"]] = np.frombuffer(
                buf, dtype="<f8"
            ).reshape(sec["shape"]).copy()
    return manifest["meta"], sections


def state_to_checkpoint(state: HyperState, variant: str,
                        spec: EnvironmentSpec) -> tuple[dict, dict]:
    meta = {"variant": variant, "spec": dataclasses.asdict(spec)}
    sections: dict = {}
    if isinstance(state.predictor, CoeffMeanPredictor):
        sections["theta1"] = state.predictor.theta1
    else:
        meta["fno"] = {
            "dimension": state.predictor.dimension,
            "width": state.predictor.width,
            "modes": state.predictor.modes,
        }
        for name, arr in state.predictor.params.items():
            sections["fno_" + name] = arr
    if state.cov_params is not None:
        sections["theta2"] = state.cov_params.theta2
    return meta, sections


def save_tasks(path: str, spec: EnvironmentSpec, split: str,
               tasks: list[Task]) -> None:
    """Serialize generated tasks in the checkpoint container format."""
    meta = {"spec": dataclasses.asdict(spec), "split": split,
            "n": len(tasks),
            "m_count": tasks[0].m_count if tasks else None}
    sections: dict = {}
    for i, t in enumerate(tasks):
        key = f"t{i:04d}_"
        sections[key + "y"] = t.observations[0].y
        sections[key + "tau"] = np.asarray(t.observations[0].tau)
        sections[key + "input"] = t.input_data.values
        sections[key + "truth"] = t.truth.values
    save_checkpoint(path, meta, sections)


def load_tasks(path: str) -> tuple[Environment, str, TaskDataset]:
    """Rebuild an environment and its task dataset from save_tasks output."""
    meta, sections = load_checkpoint(path)
    spec = EnvironmentSpec(**meta["spec"])
    env = make_environment(spec)
    tasks = []
    for i in range(meta["n"]):
        key = f"t{i:04d}_"
        tasks.append(Task(
            mset=env.mset,
            observations=[Observation(sections[key + "y"],
                                      float(sections[key + "tau"]))],
            input_data=Field(env.grid, sections[key + "input"]),
            model=env.model,
            truth=Field(env.grid, sections[key + "truth"]),
            m_count=meta["m_count"],
        ))
    dataset = TaskDataset(tasks, env.model, env.template_cov,
                          env.spec.problem)
    return env, meta["split"], dataset


def state_from_checkpoint(env: Environment, meta: dict,
                          sections: dict) -> HyperState:
    cov_params = None
    if "theta2" in sections:
        cov_params = CovarianceParams(sections["theta2"])
    if meta["variant"] == "independent":
        theta1 = sections["theta1"]
        basis = _truncate_cov(env.hyper_cov, theta1.shape[0])
        predictor = CoeffMeanPredictor(basis, theta1)
        return HyperState(predictor, hyper_cov=basis, cov_params=cov_params)
    info = meta["fno"]
    predictor = FnoPredictor(info["dimension"], info["width"], info["modes"])
    predictor.params = {
        name[len("fno_"):]: arr
        for name, arr in sections.items() if name.startswith("fno_")
    }
    return HyperState(predictor, cov_params=cov_params)
