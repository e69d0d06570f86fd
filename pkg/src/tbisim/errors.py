"""Exception types shared across the package."""


class TbiError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI."""

    code = "ERROR"


class DomainError(TbiError, ValueError):
    code = "DOMAIN_ERROR"


class ValidationError(TbiError, ValueError):
    code = "INVALID_STATE"


class ConfigError(TbiError, ValueError):
    code = "CONFIG_ERROR"


class SearchError(TbiError, RuntimeError):
    """Root search could not bracket or lost monotonicity."""

    code = "SEARCH_ERROR"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CalibrationError(TbiError, RuntimeError):
    code = "CALIBRATION_ERROR"


class ConstraintError(TbiError, ValueError):
    code = "CONSTRAINT_ERROR"


class FitError(TbiError, RuntimeError):
    code = "FIT_ERROR"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientDataError(TbiError, ValueError):
    code = "INSUFFICIENT_DATA"
