"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, see ``contrastive_mi.cli``.
"""


class ContrastiveMIError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ContrastiveMIError, ValueError):
    """Invalid configuration or hyperparameter."""


class DimensionError(ContrastiveMIError, ValueError):
    """Array shapes do not line up."""


class BatchError(ConfigError):
    """Batch too small for the requested objective."""


class DomainError(ContrastiveMIError, ValueError):
    """Argument lies outside the domain of a generating function or divergence."""


class ContractError(ContrastiveMIError, RuntimeError):
    """A caller violated an API contract (e.g. backward on a non-scalar)."""


class NumericError(ContrastiveMIError, FloatingPointError):
    """A NaN/Inf appeared where a finite value is required."""


class NumericDivergence(NumericError):
    """Training produced a non-finite loss.

    ``report`` carries the trajectory recorded before the failure, if any.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class OracleBudgetError(ContrastiveMIError, RuntimeError):
    """Exact enumeration would exceed the configured term budget."""
