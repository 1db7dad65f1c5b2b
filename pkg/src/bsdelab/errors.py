"""Exception hierarchy shared by all bsdelab modules."""


class BsdeLabError(Exception):
    """Base class for every error raised by the package."""


class DomainError(BsdeLabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConstantInvalidError(BsdeLabError):
    """A closed-form constant cannot be used at the requested parameters."""


class ConvergenceError(BsdeLabError):
    """An iterative or series procedure did not converge."""


class StepSizeError(ConvergenceError):
    """The inner Picard iteration failed; the time step is too coarse."""


class BasisError(BsdeLabError):
    """Regression normal equations are too ill-conditioned to be trusted."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ShapeError(BsdeLabError, ValueError):
    """Array shapes of related objects do not agree."""


class SimulationError(BsdeLabError):
    """The forward simulation produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ValidationError(BsdeLabError, ValueError):
    """A model, driver or coefficient set fails a sampled validation predicate."""


class DiscretizationError(BsdeLabError):
    """A solution violates an a-priori bound, signalling a bad discretization."""


class ImportanceSamplingError(BsdeLabError):
    """Girsanov weights degenerated (effective sample size too small)."""


class BudgetExhaustedError(BsdeLabError):
    """A nested Monte Carlo check ran out of its evaluation budget."""
