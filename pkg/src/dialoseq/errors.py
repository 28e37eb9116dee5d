"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a programming error and escapes as-is.
"""


class DialoseqError(Exception):
    pass


class ConfigError(DialoseqError):
    """Invalid configuration, flags, or parameter ranges."""


class DataError(DialoseqError):
    """Missing or malformed input data (corpora, episode files, stores)."""


class NumericError(DialoseqError):
    """Non-finite values or diverged optimization."""


class ShapeError(DialoseqError):
    """Tensor shape or rank contract violation."""


class TapeError(DialoseqError):
    """Gradient-tape misuse (reuse after backward, loss not recorded)."""
