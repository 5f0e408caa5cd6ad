"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
EstimationError (and subclasses) -> 4.
"""

__all__ = [
    "EhivError",
    "ConfigError",
    "DataError",
    "EstimationError",
    "RankError",
    "TrimmingError",
    "InstabilityError",
]


class EhivError(Exception):
    """Base class for all package errors."""


class ConfigError(EhivError):
    """Invalid specification, option, or configuration value."""


class DataError(EhivError):
    """Input data fails validation (shapes, types, degenerate columns)."""


class EstimationError(EhivError):
    """Numerical failure during estimation."""


class RankError(EstimationError):
    """A cross-moment or design matrix is singular."""


class TrimmingError(EstimationError):
    """Trimming left no usable observations, or floors are violated."""


class InstabilityError(EstimationError):
    """Too many resampling replicates failed for results to be trusted."""
