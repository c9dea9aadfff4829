"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: configuration problems exit
with 1, data problems with 2 and numerical failures with 3.
"""


class HyperlabelError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(HyperlabelError):
    """Invalid configuration value, parameter combination or unknown key."""


class DataError(HyperlabelError):
    """Invalid or inconsistent input data."""


class MalformedHeader(DataError):
    """Embedding file header is truncated or carries the wrong magic."""


class DimensionMismatch(DataError):
    """Embedding and metadata files disagree on the number of records."""


class ZeroVector(DataError):
    """An embedding row is all zeros and cannot be normalized."""


class InvalidTimestamp(DataError):
    """A metadata record carries a non-integer or negative timestamp."""


class DuplicateIndex(DataError):
    """Two metadata records claim the same index."""


class ValidationError(DataError):
    """A persisted structure violates its declared invariants."""


class NumericError(HyperlabelError):
    """A numerical routine produced non-finite values."""
