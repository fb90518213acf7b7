"""Exception types raised across the package."""


class SpinError(Exception):
    """Base class for errors raised by this package."""


class FullSupportError(SpinError, ValueError):
    """A policy or logged behavior probability is not strictly positive."""


class SingularDesignError(SpinError, ValueError):
    """The regression design matrix is rank deficient or underdetermined."""


class UnsupportedOracleError(SpinError, TypeError):
    """No exact performance oracle exists for this environment."""


class ConfigError(SpinError, ValueError):
    """An experiment configuration value is missing or invalid."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
