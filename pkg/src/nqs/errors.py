"""Exception hierarchy shared by every module."""


class NQSError(Exception):
    """Base class for all package errors."""


class DomainError(NQSError, ValueError):
    """Argument outside the domain of an operation."""


class CapacityError(NQSError):
    """Request exceeds what the dense/exhaustive routines support."""


class StateError(NQSError):
    """Sampler or estimator hit a configuration with zero amplitude."""


class ProposalError(NQSError):
    """Transition kernel cannot propose a move from the current configuration."""


class NumericalError(NQSError, ArithmeticError):
    """Linear solve or update produced a singular or non-finite result."""


class OptimizationError(NQSError):
    """Optimization diverged; carries the last finite parameter vector."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class LossError(NQSError):
    """Tomography loss is undefined on a snapshot (zero model amplitude)."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ConfigError(NQSError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
