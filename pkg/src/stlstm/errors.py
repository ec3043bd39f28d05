"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axis."""


class ConfigurationError(ValueError):
    """A parameter or configuration value violates its contract."""


class UsageError(RuntimeError):
    """An API was driven out of order (e.g. backward with a stale/missing cache)."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared where finite math was required."""


class DatasetFormatError(ValueError):
    """Base class for malformed dataset/checkpoint files."""


class MagicMismatchError(DatasetFormatError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(DatasetFormatError):
    """The file carries an unsupported format version."""


class TruncatedFileError(DatasetFormatError):
    """The file ends before the data promised by its header."""


class HeaderMismatchError(DatasetFormatError):
    """Header fields are internally inconsistent (counts, shapes, offsets)."""
