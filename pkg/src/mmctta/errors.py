"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ConfigError(ValueError):
    """A world, schedule or experiment configuration is invalid."""


class DivergenceError(RuntimeError):
    """Training or adaptation produced a non-finite value."""


class InsufficientSupportError(ValueError):
    """A class has too few samples to estimate its statistics."""
