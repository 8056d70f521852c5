"""Exploratory mean-variance control with Levy jumps: models, simulators and closed forms."""

from .errors import JumpexError
from .levy_model import MarketModel, sigma_matrix
from .model_config import ExperimentConfig, load_experiment_config
from .optimal_control import optimal_law, solve_alpha_beta, value_function

__all__ = [
    "ExperimentConfig",
    "JumpexError",
    "MarketModel",
    "load_experiment_config",
    "optimal_law",
    "sigma_matrix",
    "solve_alpha_beta",
    "value_function",
]
