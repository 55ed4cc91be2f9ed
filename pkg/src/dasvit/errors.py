"""Exception hierarchy shared across the package."""


class DasvitError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DasvitError, ValueError):
    """Operands do not conform to a primitive's shape rule."""


class NonFiniteError(DasvitError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(DasvitError, ValueError):
    """Invalid configuration value or unknown config key."""


class GenotypeError(DasvitError, ValueError):
    """Malformed genotype document or underivable architecture."""


class DataError(DasvitError, ValueError):
    """Dataset file missing, truncated, or malformed."""


class OptimizerError(DasvitError, RuntimeError):
    """Optimizer invoked in an invalid state (e.g. missing gradient)."""


class SearchAbort(DasvitError, RuntimeError):
    """Search loop aborted; carries the path of the diagnostic dump."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
