"""
errors.py - Exception hierarchy shared by every module
Each class carries the CLI exit code it maps to
"""

from typing import Any, Dict, Optional


class AdaptMpcError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context = context or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} ({details})"


class ConfigurationError(AdaptMpcError):
    """Invalid configuration, layer list, bounds, timing or missing file."""

    exit_code = 2


class ShapeError(ConfigurationError):
    """Dimension mismatch between arrays, models or plants."""


class IngestionError(ConfigurationError):
    """A result file does not match the expected schema."""


class NumericError(AdaptMpcError):
    """Non-finite values encountered during a computation."""

    exit_code = 3


class TrainingError(NumericError):
    """Meta-training or adaptation produced a non-finite loss or gradient."""


class SolverError(NumericError):
    """The SQP iteration produced a non-finite rollout."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, AdaptMpcError):
        return exc.exit_code
    return 1
