"""
Error hierarchy for viscosity-lab.

Numerical modules raise these; the orchestrator maps them to exit codes.
"""

from typing import Any, Optional


class LabError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage


class ArgumentError(LabError, ValueError):
    """Invalid argument passed to an operation."""

    exit_code = 4


class EvaluationError(LabError):
    """A model evaluator produced non-finite values."""

    exit_code = 3


class ConfigError(LabError):
    """Run configuration failed validation."""

    exit_code = 2


class SolverError(LabError):
    """Eigensolver or linear solver failure, optionally with partial results."""

    exit_code = 3

    def __init__(
        self, message: str, partial: Any = None, stage: Optional[str] = None
    ):
        super().__init__(message, stage=stage)
        self.partial = partial


class PreconditionError(LabError):
    """An operation was called outside its contract."""

    exit_code = 4


class ContourError(PreconditionError):
    """An eigenvalue lies on or too close to a quadrature contour."""
