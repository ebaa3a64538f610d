"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration or problem file is malformed."""


class NumericalFailure(RuntimeError):
    """An iteration produced non-finite values or diverged.

    ``iteration`` holds the index at which the failure was detected.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConvergenceError(RuntimeError):
    """A fixed-point solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else []


class AssumptionViolation(ValueError):
    """Constants fall outside the regime where the convergence bounds apply."""
