"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code, see :mod:`scorecomp.cli`.
"""


class ScoreCompError(Exception):
    """Base class for all package errors."""


class DomainError(ScoreCompError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(ScoreCompError, ValueError):
    """Inconsistent or unparsable configuration."""


class DataError(ScoreCompError, ValueError):
    """A dataset file is missing, malformed or inconsistent."""


class NumericError(ScoreCompError, ArithmeticError):
    """A computation produced non-finite values."""


class IntegrityError(ScoreCompError):
    """A binary container failed its magic, length or checksum checks."""


class ShapeMismatchError(ScoreCompError, ValueError):
    """Parameter shapes disagree with the network configuration."""
