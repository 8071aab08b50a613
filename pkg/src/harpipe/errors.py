"""Exception types shared across the package."""


class HarpipeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HarpipeError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(HarpipeError):
    """A configuration value is invalid or inconsistent."""


class DataError(HarpipeError):
    """Input data violates a contract (non-finite values, missing labels, ...)."""


class ParseError(DataError):
    """A file could not be parsed; message includes the offending line."""


class FormatError(HarpipeError):
    """A serialized artifact is corrupted or has an unsupported version."""
