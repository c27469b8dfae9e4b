"""Distributed gradient descent with an iteratively updated pre-conditioner."""

from .coordinator import IPG, GD, NAG, HBM, Adam, BFGS, AlphaSchedule, NoiseSpec, Network
from .errors import ConfigError, DivergenceError, IngestError
from .harness import ExperimentConfig, RunTrace, run_experiment

__all__ = [
    "IPG", "GD", "NAG", "HBM", "Adam", "BFGS", "AlphaSchedule", "NoiseSpec", "Network",
    "ConfigError", "DivergenceError", "IngestError", "ExperimentConfig", "RunTrace", "run_experiment",
]
__version__ = "0.1.0"
