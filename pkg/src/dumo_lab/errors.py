from __future__ import annotations


class LabError(Exception):
    """Base class for all errors raised by dumo_lab."""


class ConfigError(LabError, ValueError):
    pass


class DomainError(LabError, ValueError):
    """Argument outside the mathematical domain of an operation (e.g. t <= 0)."""


class StructuralError(LabError, ValueError):
    """Shape or conditioning-input mismatch."""


class DataError(LabError, ValueError):
    pass


class DivergenceError(LabError, FloatingPointError):
    """A loss or gradient went non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
