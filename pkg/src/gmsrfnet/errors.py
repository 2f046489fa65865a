"""Exception types shared across the package."""


class GmsrfError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GmsrfError):
    """Tensor shape or dimension mismatch."""


class StateError(GmsrfError):
    """Operation invalid in the current lifecycle state."""


class UsageError(GmsrfError):
    """Invalid argument or call pattern."""


class NumericsError(GmsrfError):
    """Non-finite values where finite ones are required."""


class FormatError(GmsrfError):
    """Malformed or incompatible file content."""


class CorruptionError(GmsrfError):
    """File failed an integrity check (truncation, checksum)."""


class ConfigError(GmsrfError):
    """Invalid configuration value."""


class DataError(GmsrfError):
    """Dataset inconsistency (missing pairs, bad layout)."""
