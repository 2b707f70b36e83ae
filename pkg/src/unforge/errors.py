"""Exception taxonomy shared across the package."""

from __future__ import annotations


class UnforgeError(Exception):
    """Base class for all package errors."""


class StructuralMismatchError(UnforgeError):
    """Two parameter stores disagree in names, order, or shapes."""


class CapabilityError(UnforgeError):
    """A computation graph uses an operation outside the supported set."""


class ConfigError(UnforgeError):
    """Invalid model, training, objective, or experiment configuration."""


class GenerationError(UnforgeError):
    """Corpus generation cannot satisfy the request (e.g. value pools exhausted)."""


class FormatError(UnforgeError):
    """A checkpoint file is corrupt or truncated.

    ``offset`` is the byte offset at which decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(UnforgeError):
    """Training hit a non-finite loss or gradient.

    Carries the failing step index plus the parameters and trace accumulated
    so far, so that instability runs still yield analyzable artifacts.
    """

    def __init__(self, message: str, step: int, theta=None, trace=None):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.theta = theta
        self.trace = trace


class DegenerateDirectionError(UnforgeError):
    """Direction of a zero difference vector was requested."""
