# hybrid/errors.py
# Exception hierarchy shared by every module. The CLI maps these to exit codes.

from __future__ import annotations
from typing import Optional


class HybridTrainError(Exception):
    """Root of all engine errors."""


class ValidationError(HybridTrainError, ValueError):
    pass


class ShapeError(ValidationError):
    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class ConfigError(ValidationError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class PlanningError(ValidationError):
    pass


class FormatError(HybridTrainError):
    pass


class DivergenceError(HybridTrainError, ArithmeticError):
    def __init__(self, message: str, *, layer: Optional[str] = None, step: Optional[int] = None):
        self.layer = layer
        self.step = step
        super().__init__(message)


class SimulationError(HybridTrainError, RuntimeError):
    pass
