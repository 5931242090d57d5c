"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code, so anything raised deliberately
anywhere in the library should subclass one of these.
"""


class DenoadError(Exception):
    """Base class for all deliberate errors."""

    exit_code = 1


class ConfigError(DenoadError):
    """Invalid or inconsistent configuration / manifest."""

    exit_code = 2


class DataError(DenoadError):
    """Missing, malformed, or empty input data."""

    exit_code = 3


class NumericError(DenoadError):
    """Non-finite values or an exhausted learning-rate schedule."""

    exit_code = 4


class IncompatibilityError(DenoadError):
    """Artifact does not match the model it is being attached to."""

    exit_code = 5


class MissingAdapterError(DataError):
    """No adapter set registered for a requested language."""

