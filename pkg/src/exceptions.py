"""
Exception types raised by the BurstMamba library.
"""

from typing import Optional


class BurstMambaError(Exception):
    """Base class for all library errors."""


class ShapeError(BurstMambaError, ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(BurstMambaError, ArithmeticError):
    """An operation produced NaN or Inf."""


class TensorFormatError(BurstMambaError, ValueError):
    """A ".nt" file could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(BurstMambaError):
    """A checkpoint archive is incomplete or unreadable."""


class ConfigMismatchError(CheckpointError):
    """Archive configuration disagrees with the requested configuration."""

    def __init__(self, mismatches: list):
        self.mismatches = mismatches
        super().__init__("; ".join(mismatches))


class TrainingAborted(BurstMambaError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ValidationError(BurstMambaError, ValueError):
    """An argument violates an operation's precondition (odd extents, dt <= 0, ...)."""
