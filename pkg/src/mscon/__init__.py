"""Multi-similarity contrastive learning with learned per-similarity uncertainty weights."""

from .errors import ContractViolation, DegenerateInputError, TrainingDivergenceError

__version__ = "0.1.0"

__all__ = ["ContractViolation", "DegenerateInputError", "TrainingDivergenceError", "__version__"]
