"""Exception types shared across the package."""


class VigilError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VigilError):
    """Tensor extents do not conform for the requested operation."""


class ConfigError(VigilError):
    """Invalid or inconsistent configuration."""


class DataFormatError(VigilError):
    """Malformed on-disk artifact (container, checkpoint, manifest)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(VigilError):
    """NaN/Inf encountered, or a numerical check failed."""
