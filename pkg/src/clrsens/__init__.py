"""Centered likelihood-ratio estimators of steady-state linear response for
SDEs on the unit torus, with a spectral Fokker-Planck reference solver."""

from .estimators import (
    EstimateSummary,
    aggregate,
    aggregate_clr,
    aggregate_lr_uncentered,
    run_ensemble,
    run_replica,
    y_update,
    z_update,
)
from .integrators import em_step, it2_step, scheme_coefficients
from .model import Problem, get_problem, torus_wrap, validate_problem
from .oracle import SpectralGrid, response_fd, response_reference, stationary_density

__version__ = "0.1.0"

__all__ = [
    "EstimateSummary", "aggregate", "aggregate_clr", "aggregate_lr_uncentered", "run_ensemble",
    "run_replica", "y_update", "z_update", "em_step", "it2_step", "scheme_coefficients", "Problem",
    "get_problem", "torus_wrap", "validate_problem", "SpectralGrid", "response_fd",
    "response_reference", "stationary_density",
]
