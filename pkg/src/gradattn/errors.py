"""Exception types shared across the package."""


class GradAttnError(Exception):
    """Base class for all package errors."""


class DimensionError(GradAttnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GradAttnError, ValueError):
    """A documented precondition was violated."""


class NumericError(GradAttnError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class OracleError(GradAttnError, AssertionError):
    """A verification oracle could not produce a trustworthy answer."""


class FormatError(GradAttnError, ValueError):
    """A binary file does not match its declared format."""
