"""Exception hierarchy shared across the package."""


class VqsegError(Exception):
    """Base class for all vqseg errors."""


class DimensionError(VqsegError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(VqsegError):
    """A configuration value violates its constraints."""


class ContractError(VqsegError):
    """An operation was called outside its contract (e.g. non-scalar backward root)."""


class DomainError(VqsegError):
    """A numeric input lies outside the mathematical domain of the operation."""


class NumericError(VqsegError):
    """A non-finite value appeared where finite values are required."""


class IntegrityError(VqsegError):
    """Stored artifacts (datasets, checkpoints) are inconsistent with their manifest."""
