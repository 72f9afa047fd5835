"""Exception types shared across the package."""


class IvwaldError(Exception):
    """Base class for all errors raised by this package."""


class DataError(IvwaldError):
    """Invalid observed-data table or model specification."""


class RankDeficiencyError(IvwaldError):
    """Design matrix is numerically rank deficient."""


class SeparationError(IvwaldError):
    """Logistic MLE diverges (perfect or quasi-perfect separation)."""


class ConvergenceError(IvwaldError):
    """Iterative fit did not converge within the iteration budget."""


class SingularJacobianError(IvwaldError):
    """Newton step cannot be computed."""


class DegenerateEquationError(IvwaldError):
    """Estimating equation does not identify its parameter."""


class PositivityError(IvwaldError):
    """A fitted quantity violates a positivity floor that the estimator requires."""


class RepresenterError(IvwaldError):
    """A Riesz representer or weight function violates its admissibility conditions."""


class SimulationError(IvwaldError):
    """Data-generating process or replication harness failure."""
