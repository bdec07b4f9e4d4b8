"""Exception types shared across the package."""


class CnagnnError(Exception):
    """Base class for all package errors."""


class DimensionError(CnagnnError):
    """Operand shapes are incompatible."""


class NumericError(CnagnnError):
    """A computation produced non-finite values."""


class ContractError(CnagnnError):
    """A documented precondition was violated by the caller."""


class IngestionError(CnagnnError):
    """A dataset file is missing or unreadable."""


class ValidationError(CnagnnError):
    """Dataset contents violate the bundle format."""


class InitializationError(CnagnnError):
    """A fitted initialization failed to reach its required quality."""


class UndefinedResultError(CnagnnError):
    """The requested statistic is undefined for the given input."""
