"""Exception hierarchy shared by every module.

Errors caused by bad arguments or inputs also derive from ``ValueError`` so
callers that only know the standard library still catch them.
"""

from __future__ import annotations

from typing import Mapping


class McwfError(Exception):
    """Base class for all package errors."""


class NumericalError(McwfError):
    """A numerical procedure failed to produce a trustworthy result."""


class InvalidArgumentError(McwfError, ValueError):
    pass


class InvalidInputError(McwfError, ValueError):
    pass


class InvalidWindowError(InvalidInputError):
    pass


class ConfigError(McwfError, ValueError):
    """Schema violation; the message names the dotted field path."""

    def __init__(self, message: str, problems: list[str] | None = None) -> None:
        super().__init__(message)
        self.problems = problems or [message]


class FitError(NumericalError):
    """The potential fit could not reach acceptable residuals."""

    def __init__(self, message: str, residuals: Mapping[str, float]) -> None:
        super().__init__(message)
        self.residuals = dict(residuals)


class SolverError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class ClassificationError(NumericalError):
    pass


class StepSizeError(NumericalError):
    """The jump probability of a fixed step exceeds the allowed bound."""

    def __init__(self, message: str, total_probability: float) -> None:
        super().__init__(message)
        self.total_probability = total_probability


class InvalidJumpError(NumericalError):
    pass


class WraparoundError(NumericalError):
    pass


class IntegratorError(NumericalError):
    pass


class EnsembleError(NumericalError):
    pass


__all__ = [
    "ClassificationError",
    "ConfigError",
    "ConvergenceError",
    "EnsembleError",
    "FitError",
    "IntegratorError",
    "InvalidArgumentError",
    "InvalidInputError",
    "InvalidJumpError",
    "InvalidWindowError",
    "McwfError",
    "NumericalError",
    "SolverError",
    "StepSizeError",
    "WraparoundError",
]
