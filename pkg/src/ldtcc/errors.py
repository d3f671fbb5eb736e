"""Typed errors shared across the package."""


class LdtError(Exception):
    """Base class for all package errors."""


class InvalidArgument(LdtError, ValueError):
    pass


class NumericFailure(LdtError, RuntimeError):
    """A numerical routine failed; attach whatever helps to diagnose it."""

    def __init__(self, message, residual=None, iterate=None, diagnostics=None):
        super().__init__(message)
        self.residual = residual
        self.iterate = iterate
        self.diagnostics = dict(diagnostics or {})


class InfeasibleThreshold(LdtError):
    """No point with F(u, xi) >= z could be located."""


class CurvatureFailure(LdtError):
    """Second-order correction is undefined (matrix not positive definite)."""

    def __init__(self, message, component=None, min_eig=None):
        super().__init__(message)
        self.component = component
        self.min_eig = min_eig


class ParseError(LdtError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ConfigError(LdtError, ValueError):
    pass
