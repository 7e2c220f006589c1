"""Exception hierarchy shared by every module."""


class DelayHJBError(Exception):
    """Base class; the CLI turns any subclass into a machine-readable error block."""


class InvalidInput(DelayHJBError, ValueError):
    pass


class ControllabilityFailure(DelayHJBError):
    """The reduced covariance is singular for every t > 0 (Kalman rank deficient)."""


class ImageInclusionViolated(DelayHJBError):
    """A vector that must lie in the range of a covariance (or of sigma) does not."""


class HamiltonianUnbounded(DelayHJBError):
    pass


class ConvergenceFailure(DelayHJBError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class TerminalSingularity(DelayHJBError):
    pass


class OracleTooLarge(DelayHJBError):
    pass


class ParseError(InvalidInput):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
