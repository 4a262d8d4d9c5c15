"""Exception and warning types shared across the package."""


class ModelError(ValueError):
    """Raised when supplied model coefficients violate a structural
    requirement (e.g. loss of uniform ellipticity, negative killing rate)."""


class InfeasibleError(RuntimeError):
    """Raised when the problem data cannot be matched by any posterior law
    absolutely continuous w.r.t. the prior.

    `locus` optionally carries a (t, x) pair identifying where the support
    condition failed.
    """

    def __init__(self, message, locus=None):
        super().__init__(message)
        self.locus = locus


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its iteration budget.

    Carries the convergence trace accumulated so far in `trace`.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class UndershootWarning(RuntimeWarning):
    """Crank-Nicolson produced a negative undershoot beyond tolerance;
    a finer time grid is recommended."""
