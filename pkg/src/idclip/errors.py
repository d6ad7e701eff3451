"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration and constraint
problems exit 2, data problems exit 3, file-format version problems exit 4.
"""


class IdClipError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(IdClipError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class UsageError(IdClipError, RuntimeError):
    """An operation was called in a way its contract forbids."""


class ConfigError(IdClipError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ConstraintError(IdClipError, ValueError):
    """A dataset balance constraint cannot be satisfied."""


class FormatError(IdClipError, ValueError):
    """A caption or template string is malformed."""


class GalleryMissError(IdClipError, KeyError):
    """A person name could not be resolved in the face gallery."""


class SequenceTooLongError(IdClipError, ValueError):
    """An expanded token sequence exceeds the encoder's maximum length."""


class DataError(IdClipError, ValueError):
    """An input file is corrupt or internally inconsistent."""


class VersionError(IdClipError, ValueError):
    """A file carries an unsupported format version."""
