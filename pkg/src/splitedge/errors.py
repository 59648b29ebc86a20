"""Exception types shared across the package."""
from __future__ import annotations

from typing import Sequence

__all__ = ["DomainError", "InfeasibleError", "NumericalError", "ConfigError"]


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class InfeasibleError(ValueError):
    """No allocation satisfies the latency/bandwidth constraints.

    ``devices`` lists the offending device ids when they are known.
    """

    def __init__(self, message: str, devices: Sequence[int] = ()):
        super().__init__(message)
        self.devices = list(devices)


class NumericalError(ArithmeticError):
    """A solver produced a non-finite intermediate value."""


class ConfigError(ValueError):
    """A configuration file is malformed or has unknown keys."""
