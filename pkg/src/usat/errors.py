"""Exception hierarchy.

``ValidationError`` subclasses signal bad user input or configuration (CLI exit
code 1); everything else under ``USatError`` is a runtime failure (exit code 2).
"""


class USatError(Exception):
    pass


class ValidationError(USatError, ValueError):
    pass


class DivisibilityError(ValidationError):
    pass


class CoverageError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class EmptySubsetError(ValidationError):
    pass


class FootprintError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class AllocationError(ValidationError):
    pass


class RatioError(ValidationError):
    pass


class UnknownBandError(ValidationError, KeyError):
    pass


class UnknownClassError(ValidationError, KeyError):
    pass


class GeometryMismatchError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class ShapeError(USatError):
    pass


class EmptyGroupError(USatError):
    pass


class AllVisibleError(USatError):
    pass


class NonFiniteError(USatError, FloatingPointError):
    pass


class NoPositivesError(USatError):
    pass


class OutOfBoundsError(USatError):
    pass


class AlignmentError(USatError):
    pass
