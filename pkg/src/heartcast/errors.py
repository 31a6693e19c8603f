"""Exception types shared across the package."""


class HeartcastError(Exception):
    """Base class for all errors raised by heartcast."""


class DimensionError(HeartcastError, ValueError):
    """Operand shapes do not conform."""


class ContractError(HeartcastError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(HeartcastError, ValueError):
    """An invalid configuration value."""


class DataError(HeartcastError, ValueError):
    """Input data is malformed, incomplete or too short."""


class GapError(DataError):
    """The hourly grid has a missing (station, feature, hour) entry."""


class DuplicateError(DataError):
    """The same (station, feature, timestamp) key appears twice."""


class ParseError(DataError):
    """A CSV value could not be parsed."""


class EmptyInputError(DataError):
    """The input file has no data rows."""


class CoverageError(DataError):
    """Not enough history to build the requested lag features."""


class AggregationError(HeartcastError, ValueError):
    """Per-city tables do not share the same cells."""


class TrainingDivergedError(HeartcastError, RuntimeError):
    """The training loss became non-finite."""


class DomainError(HeartcastError, ValueError):
    """An argument lies outside the domain of a formula."""
