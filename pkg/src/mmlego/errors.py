"""Exception hierarchy shared across the package.

Every error carries a stable ``code`` used by the CLI for its exit status:
1 for usage/configuration problems, 2 for data problems, 3 for numeric
divergence.
"""


class MMLegoError(Exception):
    code = 1


# usage / configuration ---------------------------------------------------------


class ConfigError(MMLegoError, ValueError):
    code = 1


class ShapeMismatch(MMLegoError, ValueError):
    code = 1


class LengthMismatch(ShapeMismatch):
    pass


class EmptyInput(MMLegoError, ValueError):
    code = 1


class ZeroVector(MMLegoError, ValueError):
    code = 1


class DepthZero(ConfigError):
    pass


class IncompatibleLatentShape(MMLegoError, ValueError):
    code = 1


class IncompatibleTask(MMLegoError, ValueError):
    code = 1


class NonScalarLoss(MMLegoError, ValueError):
    code = 1


# data ------------------------------------------------------------------------------


class DataError(MMLegoError, ValueError):
    code = 2


class EmptyBag(DataError):
    pass


class InvalidBin(DataError):
    pass


class NoComparablePairs(DataError):
    pass


class SingleClass(DataError):
    pass


class TooFewSamples(DataError):
    pass


class NoModalityAvailable(DataError):
    pass


class MalformedFile(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ChecksumMismatch(DataError):
    def __init__(self, message, tensor=None):
        self.tensor = tensor
        super().__init__(message)


class VersionUnsupported(DataError):
    pass


class ManifestInconsistent(DataError):
    pass


# numerics --------------------------------------------------------------------------


class NumericError(MMLegoError, ArithmeticError):
    code = 3


class NonFiniteValue(NumericError):
    pass


class DivergedLoss(NumericError):
    pass
