"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where a formula is defined."""


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


class SolverError(RuntimeError):
    """A numerical solver failed (CLI exit code 3)."""


class IntegrationError(SolverError):
    """Non-finite state encountered while integrating a sample path."""

    def __init__(self, message, step=None, path_index=None):
        super().__init__(message)
        self.step = step
        self.path_index = path_index


class NonConvergenceError(SolverError):
    """An iterative solver stopped without meeting its tolerance.

    ``last_iterate`` carries the final iterate so callers can inspect it or
    restart from it.
    """

    def __init__(self, message, last_iterate=None, report=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.report = report or {}
