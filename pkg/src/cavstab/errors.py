"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` (bad input, the CLI
exits with 1) and ``ComputationError`` (a fit or numerical routine failed
at run time, the CLI exits with 2).
"""

from __future__ import annotations


class CavstabError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CavstabError, ValueError):
    pass


class ComputationError(CavstabError, RuntimeError):
    pass


class ConfigurationError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class IngestionError(ValidationError):
    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConvergenceError(ComputationError):
    def __init__(self, message: str, grad_norm: float = float("nan"), iterations: int = 0):
        super().__init__(f"{message} (|grad|_inf={grad_norm:.3e} after {iterations} iterations)")
        self.grad_norm = grad_norm
        self.iterations = iterations


class SeparabilityError(ConvergenceError):
    pass


class LearningRateError(ComputationError):
    pass


class NonFiniteError(ComputationError):
    pass


class InvertibilityError(ComputationError):
    pass


class InsufficientDataError(ComputationError):
    pass
