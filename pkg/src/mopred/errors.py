"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes, so new failure modes
should subclass one of the existing categories rather than raising bare
builtins.
"""


class MopredError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(MopredError):
    """A parameter or option is outside its legal range."""


class DimensionError(MopredError):
    """Operand shapes are incompatible."""


class EmptySequenceError(MopredError):
    """A time-sequence operation received zero timesteps."""


class EmptyPoolError(MopredError):
    """A pooling reduction received zero (or zero valid) elements."""


class DegenerateMaskError(MopredError):
    """An attention query has no unmasked key to attend to."""


class AlignmentError(MopredError):
    """Two collections that must be index-aligned have different lengths."""


class InvalidSceneError(MopredError):
    """A scene violates a structural precondition (e.g. no valid target pose)."""


class NonFiniteError(MopredError):
    """A tensor contains NaN or Inf values."""


class DataError(MopredError):
    """A file or serialized record is missing, unreadable, or malformed."""


class CheckpointMismatchError(DataError):
    """A checkpoint's header is incompatible with the requested configuration."""


class TrainingDivergenceError(MopredError):
    """Training produced a non-finite loss. Carries the offending step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
