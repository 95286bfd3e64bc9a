"""Stochastic reduced ice-sheet model: equilibria, Monte Carlo paths,
Fokker-Planck densities and most probable transition paths."""

from .errors import ConfigError, DomainError, IntegrationError, NonConvergenceError, SolverError
from .model import ModelParams, equilibria

__version__ = "0.1.0"

__all__ = ["ModelParams", "equilibria", "ConfigError", "DomainError", "IntegrationError",
           "NonConvergenceError", "SolverError", "__version__"]
