"""Exception hierarchy for the bcbf package."""


class BCBFError(Exception):
    """Base class for all errors raised by bcbf."""


class ConfigurationError(BCBFError, ValueError):
    """Invalid parameters, scenario files or overrides."""


class DimensionError(BCBFError, ValueError):
    pass


class BeliefError(BCBFError, ValueError):
    """Covariance is not symmetric positive semidefinite."""


class DomainError(BCBFError, ValueError):
    pass


class DegenerateDirectionError(BCBFError, ValueError):
    """The half-space direction carries no variance (alpha^T Sigma alpha <= 0)."""


class SingularGradientError(BCBFError, ValueError):
    pass


class SingularInnovationError(BCBFError, ValueError):
    """Innovation covariance H Sigma H^T + R is (numerically) singular."""


class InfeasibleQPError(BCBFError):
    """The safety QP has no solution and slack relaxation is disabled.

    ``row`` is the index of the most violated constraint row at termination.
    """

    def __init__(self, message, row=None, violation=None):
        super().__init__(message)
        self.row = row
        self.violation = violation


class QPConvergenceError(BCBFError):
    pass

