"""Exception hierarchy. The CLI maps each class onto a stable exit code."""


class FocalError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FocalError, ValueError):
    """Invalid run configuration."""


class DataError(FocalError, ValueError):
    """Input data violates a precondition (ids, arms, shapes)."""


class NumericalError(FocalError, ArithmeticError):
    """A numerical routine failed (rank deficiency, divergence, Cholesky)."""
