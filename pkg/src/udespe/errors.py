"""Exception types shared across the package."""


class UdespeError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(UdespeError, ValueError):
    """A model parameter or argument violates its domain constraints."""


class EstimationError(UdespeError):
    """A model fit failed or did not converge.

    When raised for non-convergence, ``trajectory`` holds the parameter
    iterates so the caller can inspect what the optimizer did.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class SamplerError(UdespeError):
    """The MCMC engine could not produce draws (bad target or adaptation)."""


class CalibrationError(UdespeError):
    """Prior calibration could not satisfy its quantile constraints."""


class NoAdmissibleRegimenError(UdespeError):
    """Every candidate regimen is ruled out by the safety criterion."""


class ConfigError(UdespeError, ValueError):
    """A configuration file or field failed validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
