"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class FastmelError(Exception):
    exit_code = 1


class ConfigError(FastmelError):
    """Invalid configuration or usage (bad hyperparameter, bad flag value)."""

    exit_code = 2


class ShapeError(FastmelError):
    """Tensor rank or dimension mismatch."""

    exit_code = 2


class DataError(FastmelError):
    """Bad input data (out-of-range ids, negative durations, bounds)."""

    exit_code = 3


class FormatError(DataError):
    """Malformed on-disk file (bad magic, truncation, duplicate vocab line)."""


class IntegrityError(DataError):
    """Inconsistent checkpoint or manifest contents."""


class NumericError(FastmelError):
    """NaN/Inf encountered, or a degenerate numeric outcome."""

    exit_code = 4
