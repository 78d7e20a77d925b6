"""
Exception hierarchy shared by every attbalance sub-package.

Each error also subclasses the closest builtin so callers that only catch
``ValueError`` or ``RuntimeError`` keep working.
"""

from typing import Optional


class AttBalanceError(Exception):
    """Root of all attbalance errors."""


class DimensionError(AttBalanceError, ValueError):
    """Operand shapes are incompatible."""


class BackwardError(AttBalanceError, RuntimeError):
    """Backward pass requested in a state that violates the tape contract."""


class NumericalError(AttBalanceError, ArithmeticError):
    """A value became non-finite.

    ``component`` names the layer or loss term that produced it.
    """

    def __init__(self, message: str, component: Optional[str] = None):
        super().__init__(message)
        self.component = component


class GradCheckError(NumericalError):
    """The objective under a gradient check returned a non-finite value."""


class GeometryError(AttBalanceError, ValueError):
    """Degenerate or out-of-range box geometry."""


class DatasetError(AttBalanceError, ValueError):
    """Dataset configuration cannot be satisfied or a dataset file is invalid."""


class ConfigMismatchError(AttBalanceError, ValueError):
    """Checkpoint, dataset and run configuration do not agree."""


class CheckpointError(AttBalanceError, ValueError):
    """Checkpoint container is malformed or has an unsupported version."""
