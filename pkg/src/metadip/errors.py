"""Exception hierarchy shared by every module in the package."""


class MetaDIPError(Exception):
    """Base class for package errors."""


class DimensionError(MetaDIPError, ValueError):
    """Array shapes do not agree."""


class DegenerateInputError(MetaDIPError, ValueError):
    """Input is valid in shape but degenerate (e.g. an all-zero reference)."""


class DataError(MetaDIPError):
    """A dataset is empty or unusable."""


class UnsupportedOperationError(MetaDIPError):
    """Operation is not defined for this kind of operator or configuration."""


class FormatError(MetaDIPError):
    """A binary file is truncated or carries the wrong magic bytes."""


class UnsupportedVersionError(FormatError):
    """A file was written by an unknown format version."""


class RegistryError(MetaDIPError, KeyError):
    """Unknown name requested from a registry."""


class ConfigError(MetaDIPError, ValueError):
    """Configuration file is malformed or names an unknown key."""


class IncompatibleCheckpointError(MetaDIPError):
    """A checkpoint does not match the requested architecture or problem."""


class DivergenceError(MetaDIPError, RuntimeError):
    """Meta-training diverged."""


class NonFiniteError(MetaDIPError, FloatingPointError):
    """An iterate became NaN or infinite."""
