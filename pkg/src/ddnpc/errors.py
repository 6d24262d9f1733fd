"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when an experiment configuration is malformed or inconsistent."""


class PersistencyError(RuntimeError):
    """Raised when a data sequence fails a required excitation-order check."""


class RankDeficientError(RuntimeError):
    """Raised when a matrix that must have full row rank does not."""


class FitError(RuntimeError):
    """Raised when a coefficient fit cannot be performed on the given data."""
