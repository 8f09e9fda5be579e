"""Exception types shared across the package."""


class CaeError(Exception):
    """Base class for all package errors."""


class DimensionError(CaeError, ValueError):
    pass


class DomainError(CaeError, ValueError):
    pass


class DegenerateInputError(CaeError, ValueError):
    """Raised when a vector is too close to zero to be normalized."""


class ContractError(CaeError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(CaeError, ValueError):
    pass


class CheckpointError(CaeError, ValueError):
    pass


class TrainingDivergenceError(CaeError, RuntimeError):
    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown
