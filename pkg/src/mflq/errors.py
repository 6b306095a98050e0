"""Exceptions raised by the solvers."""


class SolverError(RuntimeError):
    """Base class for numerical failures."""


class MarginalStabilityError(SolverError):
    """A closed-loop moment operator is (numerically) singular."""


class NotStabilizingError(SolverError):
    """A feedback law is not an L2-stabilizer of the homogeneous system."""


class NotDissipativeError(SolverError):
    """The coupled Lyapunov solution is not positive definite."""


class NotFiniteError(SolverError):
    """Policy iteration found evidence that the regularized problem is not finite."""


class SingularImprovementError(SolverError):
    """``R + D' P1 D + delta I`` is singular in a policy improvement step."""


class ResonantDecayError(SolverError):
    """The signal decay rate coincides with a closed-loop mode."""


class RangeConditionError(SolverError):
    """A vector required to lie in the range of ``R + D' P1 D`` does not."""


class LimitFailure(SolverError):
    """The zero-regularization Riccati system has no admissible solution.

    ``cause`` is a short machine-readable tag, ``checks`` holds the
    diagnostics computed before the failure.
    """

    def __init__(self, cause, message, checks=None, candidate=None):
        super().__init__(f"{cause}: {message}")
        self.cause = cause
        self.checks = dict(checks or {})
        self.candidate = candidate
