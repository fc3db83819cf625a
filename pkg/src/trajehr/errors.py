"""Exception types shared across the package.

Every error names the violated contract in its message; the CLI maps
validation-type errors to exit code 1 and everything else to 2.
"""


class TrajehrError(Exception):
    """Base class for all package errors."""


class ParseError(TrajehrError):
    """A file could not be parsed; message carries line/field context."""


class ValidationError(TrajehrError):
    """A data invariant was violated; message names the invariant."""


class UnknownCode(ValidationError):
    """A code identifier is absent from the active vocabulary."""


class NotADiagnosis(ValidationError):
    """A diagnosis-only operation was given a non-diagnosis code."""


class NegativeAge(ValidationError):
    """Ages must be nonnegative."""


class InvalidSpec(ValidationError):
    """A generator spec is unusable (e.g. non-stochastic transition matrix)."""


class ConfigError(ValidationError):
    """A config file or flag set is malformed (unknown key, bad value)."""


class SequenceTooLong(ValidationError):
    """An assembled sequence exceeds the configured maximum length."""


class ShapeMismatch(TrajehrError):
    """Array shapes are inconsistent with the declared layout."""


class CheckpointMismatch(TrajehrError):
    """A checkpoint does not match the model architecture by tensor name/shape."""


class NonFiniteGradient(TrajehrError):
    """A gradient contained NaN/Inf; message names the parameter group."""


class GradMismatch(TrajehrError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""


class DegenerateLabels(TrajehrError):
    """A ranking metric was asked for on single-class labels."""
