# engine/errors.py
from __future__ import annotations

from typing import Optional


class InputDomainError(ValueError):
    """Argument outside the domain an operation is defined on."""


class FormatError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class TrainingFailure(RuntimeError):
    def __init__(self, accuracy: float, target: float):
        self.accuracy = accuracy
        self.target = target
        super().__init__(
            f"held-out accuracy {accuracy:.4f} below target {target:.4f}"
        )


class BudgetExhausted(RuntimeError):
    def __init__(self, count: int, budget: int):
        self.count = count
        self.budget = budget
        super().__init__(f"query budget exhausted ({count}/{budget})")


class ConfigError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class DegenerateBatchWarning(UserWarning):
    pass
