"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation (e.g. an atom outside the support)."""


class DegenerateTailError(DomainError):
    """Conditional sampling was requested from a set carrying zero probability mass."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or exceeded a hard scan cap."""


class ContractError(ValueError):
    """A caller broke an interface contract, such as omitting required auxiliary draws."""
