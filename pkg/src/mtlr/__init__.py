"""Matrix-weighted multi-task regression with robustness diagnostics.

Public surface: the data model (task_data), spectral diagnostics
(spectral), the linear and GLM solvers, baseline methods, synthetic
generators, evaluation metrics and the CLI.
"""

__version__ = "0.1.0"

from .baselines import fit_armul, fit_dp, fit_itl
from .evaluation import (
    MetricsRow,
    MetricsTable,
    classification_error,
    in_sample_mse,
    kfold_cv_q,
    population_mse,
    run_sweep,
)
from .solver_glm import GlmSpec, fit_mtlr_glm, glm_loss_grad, theta_step_glm
from .solver_linear import (
    FitResult,
    Hyperparameters,
    beta_step,
    fit_mtlr_linear,
    mtlr_objective,
    smoothed_gradient,
    theta_step_linear,
    whitened_ols,
)
from .spectral import WhitenedBasis, balancedness_emp, comparability_nu, seminorm_ball_project, whitened_basis
from .synthetic import (
    SynthConfig,
    SynthProblem,
    generate_problem,
    sample_decay_covariates,
    sample_task_params,
    spiked_eta,
)
from .task_data import (
    MultiTaskDataset,
    TaskDataset,
    TaskGeometry,
    second_moment,
    seminorm,
    validate_dataset,
)

__all__ = [
    "__version__",
    "FitResult",
    "GlmSpec",
    "Hyperparameters",
    "MetricsRow",
    "MetricsTable",
    "MultiTaskDataset",
    "SynthConfig",
    "SynthProblem",
    "TaskDataset",
    "TaskGeometry",
    "WhitenedBasis",
    "balancedness_emp",
    "beta_step",
    "classification_error",
    "comparability_nu",
    "fit_armul",
    "fit_dp",
    "fit_itl",
    "fit_mtlr_glm",
    "fit_mtlr_linear",
    "generate_problem",
    "glm_loss_grad",
    "in_sample_mse",
    "kfold_cv_q",
    "mtlr_objective",
    "population_mse",
    "run_sweep",
    "sample_decay_covariates",
    "sample_task_params",
    "second_moment",
    "seminorm",
    "seminorm_ball_project",
    "smoothed_gradient",
    "spiked_eta",
    "theta_step_glm",
    "theta_step_linear",
    "validate_dataset",
    "whitened_basis",
    "whitened_ols",
]
