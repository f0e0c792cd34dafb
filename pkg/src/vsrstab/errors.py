"""Exception types raised by the workbench."""


class VsrError(Exception):
    """Base class for all workbench errors."""


class DomainExceeded(VsrError):
    """Argument lies outside the validated domain of a table function."""


class RangeExceeded(VsrError):
    """Value lies above the range reachable on the validated domain."""


class DomainMismatch(VsrError):
    """Composition leaves the validated domain of the outer function."""


class InvalidExpression(VsrError):
    pass


class InvalidSpec(VsrError):
    """A sampling or error-sequence specification is malformed."""


class EmptyDomain(VsrError):
    pass


class FiniteEscape(VsrError):
    """Integration blew up (or the step size underflowed) before the horizon."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ModelEvaluationFailed(VsrError):
    pass


class NoneCertified(VsrError):
    """Not even the smallest scanned sampling-period bound could be certified."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class OriginNotFixed(VsrError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(VsrError):
    """Invalid run configuration (maps to CLI exit code 64)."""
