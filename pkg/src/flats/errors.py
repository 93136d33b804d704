"""Exception types shared across the package."""


class FlatsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FlatsError, ValueError):
    """Invalid configuration value or cross-field constraint.

    ``key`` names the offending configuration key when one applies.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class InputError(FlatsError, ValueError):
    """Array shapes or labels incompatible with the operation."""


class FormatError(FlatsError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the defect."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
