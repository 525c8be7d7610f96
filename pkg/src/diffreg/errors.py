"""Exception types raised across the package."""


class DiffRegError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffRegError, ValueError):
    """Tensor extents or channel counts do not line up."""


class DomainError(DiffRegError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(DiffRegError, ValueError):
    """Invalid configuration value.

    ``field`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
