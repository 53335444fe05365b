"""Exception types shared across the package.

Every error raised by this package derives from :class:`DicoError`, so callers
can catch one type at the boundary.  The three subtypes map onto the CLI exit
codes: config/usage problems, file I/O problems, and numeric failures.
"""


class DicoError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(DicoError):
    """An API or CLI call that is malformed regardless of data values."""


class DimensionError(DicoError):
    """Tensor rank or shape does not satisfy an operation's contract."""


class NumericError(DicoError):
    """A computation produced or received non-finite or invalid values."""


class SerializationError(DicoError):
    """A checkpoint or dataset file is malformed or inconsistent."""


class ConfigError(DicoError):
    """A run configuration file or override is invalid."""
