"""Exception types shared across the package."""


class OrderLabError(Exception):
    """Base class for all package errors."""


class DimensionError(OrderLabError, ValueError):
    """Array shapes do not line up."""


class ContractError(OrderLabError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(OrderLabError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(OrderLabError, ValueError):
    """Invalid experiment or stream configuration."""
