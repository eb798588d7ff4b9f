"""Exception hierarchy.

Validation errors (bad input, malformed files) derive from ``ValidationError``
and map to CLI exit status 1; everything else is a runtime failure (exit 2).
"""


class SciSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(SciSplatError, ValueError):
    """Input failed a precondition."""


class ShapeMismatch(ValidationError):
    pass


class InvalidRatio(ValidationError):
    pass


class InvalidStep(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class FileFormatError(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooSmall(ValidationError):
    pass


class EmptySelection(ValidationError):
    """A degraded frame retained no pixels (threshold too high for the mask)."""


class AngleNearPi(SciSplatError):
    """Rotation angle too close to pi for the principal log branch."""


class BehindCamera(SciSplatError):
    pass


class Culled(SciSplatError):
    """The Gaussian contributes nothing to this view."""


class StaleAux(SciSplatError):
    """Backward was given aux records from a different forward pass."""


class DegenerateGeometry(SciSplatError):
    pass


class Diverged(SciSplatError):
    """Loss became non-finite during training."""
