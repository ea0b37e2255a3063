"""Exception hierarchy shared by every module."""

from typing import Optional


class FusionError(Exception):
    """Root of all library errors."""


class ContractViolation(FusionError, ValueError):
    """Shapes, lengths or structural preconditions do not hold."""


class DegenerateInputError(FusionError, ValueError):
    """Input is numerically degenerate (rank deficient, zero rows, tiny eigenvalue)."""

    def __init__(self, message: str, value: Optional[float] = None):
        super().__init__(message)
        self.value = value


class DegenerateStepError(DegenerateInputError):
    """A retraction step lost rank; the caller should shrink the step."""


class ProtocolBoundError(FusionError, ValueError):
    """Missing-rate target outside [0, (M-1)/M]."""


class NonFiniteError(FusionError, ArithmeticError):
    """A NaN or Inf showed up in an intermediate quantity."""

    def __init__(self, operation: str, message: Optional[str] = None):
        super().__init__(message or f"non-finite values produced by {operation}")
        self.operation = operation


class DivergenceError(FusionError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ConfigError(FusionError, ValueError):
    """Invalid experiment configuration."""
