"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, symmetry, label)."""


class DomainError(ValueError):
    """A scalar parameter lies outside the range where the formula is defined."""


class NumericalError(ArithmeticError):
    """A linear-algebra step failed or produced a non-physical intermediate."""


class InsufficientBalance(RuntimeError):
    """A ledger round needs more one-time-pad bits than the Bob has stored."""
