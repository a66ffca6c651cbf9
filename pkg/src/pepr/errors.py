"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class PeprError(Exception):
    exit_code = 1


class ConfigError(PeprError, ValueError):
    """Bad shapes, widths, method names or option values."""

    exit_code = 1


class DataError(PeprError, ValueError):
    """Malformed feature files, missing splits, OOD rows where none are allowed."""

    exit_code = 2


class NumericError(PeprError, ArithmeticError):
    """A forward pass or loss produced NaN/Inf."""

    exit_code = 3


class UsageError(PeprError, RuntimeError):
    exit_code = 1
