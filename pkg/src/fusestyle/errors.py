"""Exception hierarchy shared by every fusestyle module."""


class FuseStyleError(Exception):
    """Base class for all library errors."""


class DimensionError(FuseStyleError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ValidationError(FuseStyleError, ValueError):
    """An argument is outside its documented domain."""


class ContractError(FuseStyleError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class NumericalError(FuseStyleError, ArithmeticError):
    """A forward computation produced a non-finite value."""


class CorruptionError(FuseStyleError, IOError):
    """On-disk data failed checksum or format verification."""
