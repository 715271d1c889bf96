"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite or undefined value."""
