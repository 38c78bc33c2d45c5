"""Exception hierarchy shared by the numerical services and the CLI."""

from typing import Optional


class SinkformerError(Exception):
    """Base class for every failure raised by the services."""


class InvalidParameterError(SinkformerError, ValueError):
    """A scalar or configuration parameter is out of its admissible range."""


class DimensionMismatchError(SinkformerError, ValueError):
    """Matrix or cloud dimensions do not line up."""


class ShapeMismatchError(DimensionMismatchError):
    """A graph input or operand has a shape other than the one declared."""


class NonSquareError(DimensionMismatchError):
    """A square matrix was required."""


class NonPositiveEntryError(SinkformerError, ValueError):
    """A kernel that must be strictly positive has a zero or negative entry."""


class NonConvergenceError(SinkformerError, RuntimeError):
    def __init__(self, message: str, iterations: int, violation: float):
        super().__init__(f"{message} (iterations={iterations}, violation={violation:.3e})")
        self.iterations = iterations
        self.violation = violation


class DivergenceError(SinkformerError, RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None, value: Optional[float] = None):
        super().__init__(message)
        self.step = step
        self.value = value


class GraphStateError(SinkformerError, RuntimeError):
    """Graph used out of order, e.g. backward before forward."""
