"""Sparse regression with latent factors estimated by principal components."""
from importlib.metadata import PackageNotFoundError, version

from .errors import DegenerateFactorError, InputError, NSLError, NumericError, RefusalError
from .penalized import (AugmentedDesign, CoefficientEstimate, PenaltySpec, brute_force_l0, estimate_sigma,
                        fit_path, lambda_grid, objective, penalty_value, threshold_update, tune)
from .pipeline import NslConfig, NslFit, clr_transform, condition_diagnostics, fit, predict, robust_spark
from .spiked_pca import (EigenSystem, ScoreSet, SpikedStructure, eigendecompose, principal_scores,
                         rate_bound, sample_covariance, top_components)

try:
    __version__ = version("nsl")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
