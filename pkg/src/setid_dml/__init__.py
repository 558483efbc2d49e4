"""Double machine learning for set-identified linear models.

Cross-fitted nuisance estimation, orthogonal support-function and bound
estimators for interval-outcome and sample-selection designs, and a
Bayesian bootstrap for inference.
"""

from .bootstrap import (BootstrapRun, ConfidenceRegion, EstimatorKind, bootstrap_draws,
                        covariance_estimate, pointwise_region, uniform_band)
from .crossfit import NuisanceProfile, crossfit, full_sample_profile, leakage_probe
from .dataset import (Dataset, DgpSpec, FoldPartition, Model, generate, kfold_partition,
                      read_csv, validate, write_csv)
from .errors import (ConvergenceError, DegenerateError, InvalidArgument, SchemaError,
                     SetIdError, ValidationError)
from .estimators import (BoundsEstimate, SupportFunctionEstimate, apd_support,
                         direction_grid, lee_ate, lee_bounds, plp_bounds_1d,
                         support_known_sigma, support_unknown_sigma)
from .learners import Kind, LearnerSpec, Penalty

__version__ = "0.1.0"

__all__ = [
    "BootstrapRun", "BoundsEstimate", "ConfidenceRegion", "ConvergenceError", "Dataset",
    "DegenerateError", "DgpSpec", "EstimatorKind", "FoldPartition", "InvalidArgument", "Kind",
    "LearnerSpec", "Model", "NuisanceProfile", "Penalty", "SchemaError", "SetIdError",
    "SupportFunctionEstimate", "ValidationError", "apd_support", "bootstrap_draws",
    "covariance_estimate", "crossfit", "direction_grid", "full_sample_profile", "generate",
    "kfold_partition", "leakage_probe", "lee_ate", "lee_bounds", "plp_bounds_1d",
    "pointwise_region", "read_csv", "support_known_sigma", "support_unknown_sigma",
    "uniform_band", "validate", "write_csv",
]
