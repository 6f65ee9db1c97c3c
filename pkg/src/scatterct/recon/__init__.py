"""Inverse solvers: density (edge-preserving, quasi-linear), photoelectric
(NLM-regularized Levenberg-Marquardt) and the cyclic driver."""

from .config import MODES, ReconConfig, lambda_grid
from .cyclic import CyclicResult, cyclic_descent
from .density import (
    DensityDivergenceError, DensityResult, ScaleOperators, data_weights, multiscale_density, solve_density_scale,
    upscale_nearest,
)
from .lsqr import SolverError, lsqr_solve
from .photoelectric import LMResult, levenberg_marquardt, scatter_jacobian_p, solve_photoelectric
from .regularization import (
    EdgeWeights, NlmWeights, edge_profile, first_difference, gradient_operator, nlm_weights, update_edge_weights,
)
from .selection import Selection, discrepancy, select_lambda

__all__ = [
    "MODES", "ReconConfig", "lambda_grid", "CyclicResult", "cyclic_descent", "DensityDivergenceError",
    "DensityResult", "ScaleOperators", "data_weights", "multiscale_density", "solve_density_scale",
    "upscale_nearest", "SolverError", "lsqr_solve", "LMResult", "levenberg_marquardt", "scatter_jacobian_p",
    "solve_photoelectric", "EdgeWeights", "NlmWeights", "edge_profile", "first_difference", "gradient_operator",
    "nlm_weights", "update_edge_weights", "Selection", "discrepancy", "select_lambda",
]
