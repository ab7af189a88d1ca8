"""Exception types shared across the package."""


class QdgsError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QdgsError):
    """Invalid configuration: bad bounds, mismatched dimensions, unknown options."""


class EvaluationRejected(QdgsError):
    """An evaluation produced unusable values (non-finite objective or measures)."""


class CovarianceError(QdgsError):
    """The coefficient covariance lost positive definiteness; a restart is required."""
