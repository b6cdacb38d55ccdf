"""Continuous-time measurement model for problem-solving process logs.

Tasks are finite-state automata with history-dependent reachable sets;
persons carry a latent ability/speed pair driving a marked point
process over actions. The package simulates cohorts, fits the model by
maximum marginal likelihood, scores persons, and runs the validation
and simulation-study pipelines end to end.
"""

from .errors import (CtdcError, EstimationError, InvalidRecordError,
                     SchemaError, TaskFileError)
from .estimate import (CorrelationCI, FitOptions, FitResult,
                       correlation_with_ci, fit_em, marginal_log_likelihood,
                       marginal_loglik_gradient, standard_errors)
from .likelihood import (FixedParams, TaskParams, TraitPair,
                         choice_probabilities, conditional_log_likelihood,
                         ground_intensity)
from .model import CTDCModel
from .quadrature import QuadratureGrid, gauss_hermite_2d
from .records import ProcessRecord, is_complete, summarize, validate_record
from .regression import (R2Difference, RegressionResult, ValidationSuite, ols,
                         r2_difference_ci, run_validation_suite)
from .scoring import TraitEstimate, score_eap, score_map
from .simulate import (STUDY_SETTINGS, SimulationConfig, sample_traits,
                       simulate_cohort, simulate_record, study_config,
                       study_params)
from .study import run_replication, run_sim_study
from .tasks import (BUILTIN_TASK_IDS, HistoryState, SuccessRule,
                    TaskDefinition, advance, builtin_task, candidates,
                    derive_outcome, load_task, parse_task, replay,
                    task_diagnostics)

__version__ = "1.0.0"

__all__ = [
    "BUILTIN_TASK_IDS",
    "CTDCModel",
    "CorrelationCI",
    "CtdcError",
    "EstimationError",
    "FitOptions",
    "FitResult",
    "FixedParams",
    "HistoryState",
    "InvalidRecordError",
    "ProcessRecord",
    "QuadratureGrid",
    "R2Difference",
    "RegressionResult",
    "STUDY_SETTINGS",
    "SchemaError",
    "SimulationConfig",
    "SuccessRule",
    "TaskDefinition",
    "TaskFileError",
    "TaskParams",
    "TraitEstimate",
    "TraitPair",
    "ValidationSuite",
    "advance",
    "builtin_task",
    "candidates",
    "choice_probabilities",
    "conditional_log_likelihood",
    "correlation_with_ci",
    "derive_outcome",
    "fit_em",
    "gauss_hermite_2d",
    "ground_intensity",
    "is_complete",
    "load_task",
    "marginal_log_likelihood",
    "marginal_loglik_gradient",
    "ols",
    "parse_task",
    "r2_difference_ci",
    "replay",
    "run_replication",
    "run_sim_study",
    "run_validation_suite",
    "sample_traits",
    "score_eap",
    "score_map",
    "simulate_cohort",
    "simulate_record",
    "standard_errors",
    "study_config",
    "study_params",
    "summarize",
    "task_diagnostics",
    "validate_record",
    "__version__",
]
