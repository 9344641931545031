"""Exception hierarchy shared by all retaug modules.

Every error raised by the library derives from RetaugError so the CLI can
convert any module failure into a machine-readable JSON report.
"""


class RetaugError(Exception):
    """Base class for all library errors."""


# embedding tables
class DimensionMismatch(RetaugError):
    pass


class DuplicateName(RetaugError):
    pass


class ZeroNormRow(RetaugError):
    pass


class NonFiniteValue(RetaugError):
    pass


class KTooLarge(RetaugError):
    pass


class ZeroNormQuery(RetaugError):
    pass


class FormatError(RetaugError):
    """Malformed binary table or checkpoint file."""


# vocabulary store / negative sets
class EmptyStoreAfterFilter(RetaugError):
    pass


class MTooLarge(RetaugError):
    pass


class NTooLarge(RetaugError):
    pass


class UnknownCategory(RetaugError):
    pass


class UnknownName(RetaugError):
    pass


# concept store
class AlignmentMismatch(RetaugError):
    pass


class NovelLeakage(RetaugError):
    pass


# augmenter
class ShapeMismatch(RetaugError):
    pass


class NonFiniteIntermediate(RetaugError):
    pass


class NonFiniteGradient(RetaugError):
    pass


class DivergenceDetected(RetaugError):
    pass


# ensemble
class LengthMismatch(RetaugError):
    pass


class BadTruncate(RetaugError):
    pass


# configuration and pipeline plumbing
class ConfigError(RetaugError):
    pass
