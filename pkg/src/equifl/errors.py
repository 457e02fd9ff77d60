"""Exception hierarchy shared across the package."""


class EquiFLError(Exception):
    """Base class for all package errors."""


class ConfigError(EquiFLError, ValueError):
    """Invalid configuration (bad layer dims, alphas, unknown keys...)."""


class SchemaError(ConfigError):
    """Dataset file does not match its declared schema."""


class DimensionError(EquiFLError, ValueError):
    """Array shapes do not line up."""


class InputError(EquiFLError, ValueError):
    """Empty or otherwise unusable input data."""


class NumericError(EquiFLError, ArithmeticError):
    """A non-finite value showed up during training."""
