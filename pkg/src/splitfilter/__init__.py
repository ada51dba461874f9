"""Splitting-up nonlinear filter with neural-network prediction densities."""

from .config import ExperimentConfig, PRESETS, preset
from .domain import Box
from .filter import (
    DegeneratePosteriorError, FilterAborted, FilterResult, Likelihood, Posterior,
    UnsupportedSensorError, estimate_normalizer, likelihood_sampler, run_filter,
)
from .model import ConfigurationError, make_benes_model, make_linear_model

__all__ = [
    "Box", "ConfigurationError", "DegeneratePosteriorError", "ExperimentConfig",
    "FilterAborted", "FilterResult", "Likelihood", "PRESETS", "Posterior",
    "UnsupportedSensorError", "estimate_normalizer", "likelihood_sampler",
    "make_benes_model", "make_linear_model", "preset", "run_filter",
]
__version__ = "0.1.0"
