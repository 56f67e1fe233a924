"""Exception types shared across the package.

Each exception belongs to one of three families that the CLI maps onto exit
codes: validation problems (2), numeric failures (3) and missing or stale
inputs (4).
"""


class SatwealthError(Exception):
    exit_code = 1


class ValidationError(SatwealthError, ValueError):
    exit_code = 2


class NumericError(SatwealthError, ArithmeticError):
    exit_code = 3


class MissingInputError(SatwealthError, FileNotFoundError):
    exit_code = 4


# raster
class EmptyStack(ValidationError):
    pass


class IncongruentTiles(ValidationError):
    pass


class InvalidFactor(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NegativeRadiance(ValidationError):
    pass


class UnknownBand(ValidationError):
    pass


# geodata
class InvalidThresholds(ValidationError):
    pass


class PoolExhausted(ValidationError):
    pass


class InvalidFractions(ValidationError):
    pass


# neuralnet
class BadShape(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class WindowTooLarge(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class NonFiniteLoss(NumericError):
    pass


# heads
class SingularSystem(NumericError):
    pass


class LengthMismatch(ValidationError):
    pass


# evaluation
class UndefinedMetric(NumericError):
    """Raised when r² is requested for a zero-variance vector."""


class TooFewGroups(ValidationError):
    pass


class TooFewRows(ValidationError):
    pass


class EmptySubset(ValidationError):
    pass


class MissingNightlightPredictions(ValidationError):
    pass


# pipeline
class ConfigError(ValidationError):
    pass


class StaleInput(MissingInputError):
    pass
