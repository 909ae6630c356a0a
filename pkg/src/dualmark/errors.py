"""Shared exception types.

Every error raised by the package derives from DualmarkError so the CLI can
map component failures to a single exit code.
"""


class DualmarkError(Exception):
    """Base class for all package errors."""


class ShapeError(DualmarkError, ValueError):
    """An operation received tensors with incompatible shapes."""


class StateError(DualmarkError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class NonFiniteError(DualmarkError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf values."""


class RejectedInput(DualmarkError, ValueError):
    """Input violates a documented precondition."""


class RejectedConfig(DualmarkError, ValueError):
    """Configuration violates a documented constraint."""


class RejectedKey(DualmarkError, ValueError):
    """A trigger key failed its divergence acceptance check."""


class MalformedPayload(DualmarkError, ValueError):
    """A bit stream cannot be decoded (e.g. truncated mid-codeword)."""


class UnreadableWatermark(DualmarkError, ValueError):
    """No orientation of a bit-matrix image produced a valid checksum."""

    def __init__(self, message, best_bit_accuracy=None):
        super().__init__(message)
        self.best_bit_accuracy = best_bit_accuracy


class NotFittedError(DualmarkError, RuntimeError):
    """An estimator method requiring a fitted model was called before fit()."""
