"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DiffRecError(Exception):
    exit_code = 1


class ConfigError(DiffRecError, ValueError):
    """Invalid hyper-parameters, shapes or option combinations."""

    exit_code = 1


class UsageError(DiffRecError, ValueError):
    """API called outside its domain (bad step index, empty tape, ...)."""

    exit_code = 1


class DataError(DiffRecError):
    """Unreadable or malformed input data."""

    exit_code = 2


class NumericalError(DiffRecError, ArithmeticError):
    """NaN/Inf surfaced from a forward pass, loss or gradient."""

    exit_code = 3
