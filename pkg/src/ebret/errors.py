"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ScaleError -> 4, EstimatorError -> 5.
"""


class EbretError(Exception):
    """Base class for all package errors."""


class ConfigError(EbretError):
    """Invalid configuration value or incompatible model pairing."""


class ModeError(ConfigError):
    """An energy-mode requirement is violated (e.g. residual without a KB)."""


class DataError(EbretError):
    """Malformed or unusable input data."""


class DimensionError(DataError):
    """Mismatched widths or lengths between aligned objects."""


class WeightSourceError(DataError):
    """An importance weight needs a knowledge base that is unavailable."""


class ScaleError(EbretError):
    """Exact enumeration requested beyond the supported small-N bound."""


class EstimatorError(EbretError):
    """A Monte Carlo estimate is unusable (e.g. degenerate weights)."""
