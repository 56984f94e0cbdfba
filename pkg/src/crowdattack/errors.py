"""Error categories surfaced by the library and mapped to CLI exit codes."""


class CrowdAttackError(Exception):
    exit_code = 1


class ConfigError(CrowdAttackError, ValueError):
    """Invalid configuration or hyperparameters."""

    exit_code = 2


class DataError(CrowdAttackError, ValueError):
    """Malformed or missing data on disk or in memory."""

    exit_code = 3


class NumericError(CrowdAttackError, ArithmeticError):
    """Non-finite values encountered during computation."""

    exit_code = 4


class UsageError(CrowdAttackError, ValueError):
    """A function was called with incompatible arguments."""

    exit_code = 5
