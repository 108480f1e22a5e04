"""Exception types shared across the package."""


class ToolkitError(Exception):
    """Base class for all package-specific errors."""


class SizeError(ToolkitError, ValueError):
    """A dimension, length, or qubit count is out of range."""


class WireError(ToolkitError, ValueError):
    """A wire index is invalid, duplicated, or out of range."""


class BackendError(ToolkitError, RuntimeError):
    """The requested computation exceeds a backend's size cap."""


class FormatError(ToolkitError, ValueError):
    """A file or record does not match its declared format."""


class ConsistencyError(ToolkitError, ValueError):
    """Two pieces of data that must agree do not."""


class DivergenceError(ToolkitError, RuntimeError):
    """An iterative fit or training run produced non-finite values."""


class ConfigError(ToolkitError, ValueError):
    """A configuration file or value is invalid."""


class CheckpointError(ToolkitError, RuntimeError):
    """A checkpoint is unreadable or does not match its config."""
