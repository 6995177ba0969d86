"""Exception types shared across the package."""


class InvalidConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class InvalidInputError(ValueError):
    """Operation inputs have incompatible shapes or invalid values."""


class InvalidStateError(RuntimeError):
    """Mutable training state is internally inconsistent."""


class UndefinedSurfaceError(ValueError):
    """Surface distances requested for a mask with empty foreground."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where finite math was required."""


class VolumeIOError(IOError):
    """Base class for volume file format errors."""


class MalformedHeaderError(VolumeIOError):
    """Sidecar JSON is unreadable or missing required keys."""


class TruncatedPayloadError(VolumeIOError):
    """Raw payload length disagrees with the header shape."""


class DtypeMismatchError(VolumeIOError):
    """Header declares a dtype this format does not support."""
