"""Exception taxonomy shared across the package."""


class IauError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IauError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractViolation(IauError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(IauError, ValueError):
    """Invalid run configuration (bad key, bad value, unsatisfiable spec)."""


class FormatError(IauError, ValueError):
    """A persisted file does not match the expected binary/text format."""


class NumericalError(IauError, ArithmeticError):
    """A computation produced NaN/Inf where finite values are required."""
