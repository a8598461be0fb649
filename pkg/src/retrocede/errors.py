"""Exception hierarchy shared by all retrocede modules."""


class RetrocedeError(Exception):
    """Base class for every error raised by this package."""


class UnsupportedOperation(RetrocedeError):
    """The model kind does not provide the requested quantity."""


class DomainError(RetrocedeError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InvalidMoments(DomainError):
    """A moment vector lies outside the closure of the power-mean ordered set."""


class ConfigError(RetrocedeError, ValueError):
    """A model or experiment configuration failed validation."""


class QuadratureError(RetrocedeError):
    """A quadrature convergence guard tripped."""


class IntegrabilityError(QuadratureError):
    """An expectation appears to diverge (tail mass does not vanish)."""


class NumericError(RetrocedeError):
    """An inner numerical routine failed to converge."""


class SolverStall(RetrocedeError):
    """The fixed-point solver could not reach its tolerance.

    Attributes
    ----------
    diagnostics : dict
        Last residuals, iteration counts and the cycle where the stall happened.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class OracleRefused(RetrocedeError):
    """The brute-force oracle was asked for a grid larger than its cost guard."""
