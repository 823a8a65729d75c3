"""Exception types raised by stereosup.

Everything derives from :class:`StereoSupError` so callers can catch the
whole family. Numerical failures additionally derive from ``ArithmeticError``
and malformed input from ``ValueError`` where that reads naturally.
"""


class StereoSupError(Exception):
    """Base class. ``stage`` is filled in by the pipeline when it re-raises."""

    stage: str | None = None


# geometry
class DegenerateProjection(StereoSupError, ArithmeticError):
    pass


class NonPositiveScale(StereoSupError, ValueError):
    pass


# losses
class DegenerateScale(StereoSupError, ArithmeticError):
    pass


class InsufficientValidPixels(StereoSupError, ValueError):
    pass


class EmptySupport(StereoSupError, ValueError):
    pass


class DegenerateCluster(StereoSupError, ArithmeticError):
    pass


# calibration
class DegenerateConfiguration(StereoSupError, ArithmeticError):
    pass


class NoConsensus(StereoSupError):
    pass


class SingularNormalEquations(StereoSupError, ArithmeticError):
    pass


class NonFiniteResidual(StereoSupError, ArithmeticError):
    pass


# metrics
class EmptyEvaluationSet(StereoSupError, ValueError):
    pass


class ZeroMeanGT(StereoSupError, ArithmeticError):
    pass


class NonPositiveMedian(StereoSupError, ValueError):
    pass


# pipeline
class ShapeMismatch(StereoSupError, ValueError):
    pass


class Rejected(StereoSupError):
    """A quality gate refused the input. Not a bug; exit code 1 in the CLI."""

    def __init__(self, reasons, stats=None):
        self.reasons = list(reasons)
        self.stats = dict(stats or {})
        super().__init__("rejected: " + ", ".join(self.reasons))


# file formats
class FormatError(StereoSupError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


class BadHeader(FormatError):
    pass


class BadImage(FormatError):
    pass
