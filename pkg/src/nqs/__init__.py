"""Neural quantum states: variational Monte Carlo with neural-network ansatze."""

__version__ = "0.1.0"

from .errors import (
    CapacityError, ConfigError, DomainError, LossError, NQSError, NumericalError, OptimizationError,
    ProposalError, StateError,
)

__all__ = [
    "__version__", "NQSError", "DomainError", "CapacityError", "StateError", "ProposalError",
    "NumericalError", "OptimizationError", "LossError", "ConfigError",
]
