"""Continual semi-supervised few-shot learning with OOD-aware prototypes,
variational MI regularization and optimal-transport feature memory."""

from .errors import ConfigError, ContractError, DimensionError, NumericError, OrderLabError

__all__ = ["ConfigError", "ContractError", "DimensionError", "NumericError", "OrderLabError"]
__version__ = "0.1.0"
