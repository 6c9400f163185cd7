"""Exception types shared across the package."""


class XcamError(Exception):
    """Base class for all package errors."""


class ShapeError(XcamError, ValueError):
    """Array dimensions do not agree with what an operation requires."""


class ConfigError(XcamError, ValueError):
    """A configuration value violates an invariant (divisibility, ranges, ...)."""


class ValidationError(XcamError, ValueError):
    """Input data is malformed (bad labels, missing files, empty splits)."""


class NumericalError(XcamError, RuntimeError):
    """A computation produced NaN or Inf."""
