"""priorlearn: meta-learned Gaussian prior prediction for PDE inverse problems.

The library covers the full pipeline: FEM function spaces and spectral
Gaussian measures, forward models with adjoint gradients (backward diffusion
in 1D, Darcy flow in 2D), closed-form linear posteriors and Newton-CG MAP
estimation, coefficient-basis and Fourier-neural-operator prior predictors,
hyper-posterior MAP training, PAC-Bayes transfer-bound calculators, and a
desk-scale experiment harness with a CLI (``priorlearn``).
"""

from .space import (
    Field,
    Grid,
    MassMatrix,
    inner_product,
    lift_measurements,
    load_field,
    relative_l2_error,
    resample,
    save_field,
)
from .measures import (
    SpectralCovariance,
    SpectralGaussian,
    TruncatedGaussian,
    build_laplacian_covariance,
    cameron_martin_norm_sq,
    kl_gaussian,
    psi_e_bound,
    sample,
    sample_truncated,
)
from .forward import (
    DarcyModel,
    HeatModel,
    MeasurementSet,
    Observation,
    darcy_solve,
    heat_forward,
    identity_measurements,
    measure,
    mollified_measurements,
    potential_grad_u,
)
from .invert import (
    LinearPosterior,
    MapResult,
    linear_posterior,
    map_newton_cg,
    posterior_trace,
)
from .predictors import (
    CoeffMeanPredictor,
    CovarianceParams,
    FnoPredictor,
    covariance_from_params,
    fno_backward,
    fno_forward,
    predict_mean_independent,
)
from .hyper import (
    HyperConfig,
    HyperState,
    Task,
    TaskDataset,
    estimate_transfer_error,
    hyper_gradient,
    hyper_logdensity,
    hyper_objective,
    log_zm_estimate,
    train,
)
from .bounds import (
    BoundInputs,
    BoundReport,
    SubGaussianDerivation,
    algorithm_bound,
    bound_bounded_dep,
    bound_bounded_indep,
    bound_subgamma,
    bound_subgaussian_dep,
    bound_subgaussian_indep,
    s_params_darcy,
    s_params_diffusion,
)
from .harness import (
    Environment,
    EnvironmentSpec,
    ExperimentConfig,
    ResultsTable,
    build_dataset,
    default_train_config,
    desk_spec,
    emit_report,
    evaluate_variant,
    generate_tasks,
    load_checkpoint,
    load_tasks,
    make_environment,
    prior_factory,
    run_experiment,
    save_checkpoint,
    save_tasks,
    state_from_checkpoint,
    state_to_checkpoint,
    train_variant,
)

__version__ = "0.1.0"
