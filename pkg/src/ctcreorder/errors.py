"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family onto an exit code (config 2, data 3, numerical 4).
"""


class CTCReorderError(Exception):
    """Base class for all package errors."""


class ConfigError(CTCReorderError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CTCReorderError, ValueError):
    """Malformed or inconsistent input data."""


class InstanceTooLarge(DataError):
    """Brute-force enumeration refused because the instance is too large."""


class NumericalError(CTCReorderError, ArithmeticError):
    """Non-finite values or undefined quantities (e.g. gradient of an infeasible target)."""
