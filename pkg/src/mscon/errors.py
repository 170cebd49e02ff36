"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a precondition (shape, range, cardinality)."""


class DegenerateInputError(ValueError):
    """Input is well-formed but numerically degenerate (zero norm, empty class, ...)."""


class TrainingDivergenceError(RuntimeError):
    """A loss or gradient became non-finite during optimization."""
