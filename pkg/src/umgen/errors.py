"""Exception types shared across the package."""


class UmgenError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UmgenError):
    """A profile, layout, or model configuration is inconsistent."""


class InputError(UmgenError):
    """A caller-supplied value is outside the accepted domain."""


class FormatError(UmgenError):
    """A file or token stream violates its declared format."""


class FitError(UmgenError):
    """Codebook fitting cannot proceed on the given data."""


class UsageError(UmgenError):
    """An operation was invoked in an invalid order or state."""
