"""Exception types raised across the package."""


class ProtoformError(Exception):
    """Base class for all package errors."""


class ContractViolation(ProtoformError, ValueError):
    """Inputs violate a shape or range precondition."""


class DomainError(ProtoformError, ValueError):
    """A function was evaluated outside of its mathematical domain."""


class DegenerateDistributionError(DomainError):
    """A truncated density has (numerically) zero mass on its support."""


class InvalidPrototypeError(ProtoformError, ValueError):
    """Prototype parameters break the constraints of their formulation."""


class ConfigurationError(ProtoformError, ValueError):
    """A model, bank or run is configured inconsistently."""


class NumericalFailure(ProtoformError, RuntimeError):
    """NaN or inf showed up in a loss or gradient."""

    def __init__(self, message, path=None, epoch=None):
        super().__init__(message)
        self.path = path
        self.epoch = epoch


class FormatError(ProtoformError, ValueError):
    """A binary file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyDatasetError(FormatError):
    """A dataset file holds zero records."""
