"""Contrastive mutual-information and density-ratio estimation on numpy.

Modules
-------
diffcore
    Reverse-mode autodiff, MLPs, Adam and gradient checking.
critics
    Joint and separable ratio models.
scoring
    Proper scoring rules from convex generating functions.
objectives
    Training losses and MI evaluators on score matrices.
oracle
    Exact computations on finite alphabets.
harness
    Gaussian benchmark, training loop and reporting.
"""

from .errors import (
    BatchError,
    ConfigError,
    ContractError,
    ContrastiveMIError,
    DimensionError,
    DomainError,
    NumericDivergence,
    NumericError,
    OracleBudgetError,
)

__version__ = "0.1.0"

__all__ = [
    "BatchError",
    "ConfigError",
    "ContractError",
    "ContrastiveMIError",
    "DimensionError",
    "DomainError",
    "NumericDivergence",
    "NumericError",
    "OracleBudgetError",
    "__version__",
]
