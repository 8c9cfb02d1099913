"""Exception and warning types raised across the package."""


class OPEError(Exception):
    """Base class for all package errors."""


class AbsoluteContinuityViolation(OPEError, ValueError):
    """Target puts mass on an action the logging policy never takes."""


class InvalidSoftening(OPEError, ValueError):
    pass


class NonConvergence(OPEError, RuntimeError):
    pass


class SingularSystem(OPEError, ValueError):
    pass


class EmptyDataset(OPEError, ValueError):
    pass


class TooFewSamples(OPEError, ValueError):
    pass


class ZeroWeightScheme(OPEError, ValueError):
    """The optimistic bias bound divides by a regression weight that is zero."""


class DuplicateItem(OPEError, ValueError):
    pass


class IndexOutOfRange(OPEError, IndexError):
    pass


class RankDeficient(OPEError, ValueError):
    pass


class SpanViolation(OPEError, ValueError):
    """The target's mean action vector leaves the span of the logging basis."""


class ZeroPropensity(OPEError, ValueError):
    pass


class LengthMismatch(OPEError, ValueError):
    pass


class BadFractions(OPEError, ValueError):
    pass


class NonFiniteObjective(OPEError, FloatingPointError):
    pass


class DataFormatError(OPEError, ValueError):
    """Input file does not follow the documented CSV/JSON layout."""


class DegenerateWeights(UserWarning):
    """All importance weights coincide, so a geometric grid collapses to a point."""
