"""Exception types raised by the solvers."""


class VIError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(VIError, ValueError):
    """Arguments have wrong shape, are infeasible, or violate a precondition."""


class InvalidInstance(InvalidInput):
    """A problem instance violates one of its structural invariants."""


class NumericalFailure(VIError, ArithmeticError):
    """A computation produced a non-finite value."""


class ProjectionDidNotConverge(VIError):
    """Dykstra's method hit its cycle budget.

    Attributes:
        residual: last cyclic increment norm.
        point: last iterate.
    """

    def __init__(self, message, residual=float("nan"), point=None):
        super().__init__(message)
        self.residual = residual
        self.point = point


class Diverged(VIError):
    """The inner fixed-point iteration is moving away from a fixed point."""


class InsufficientData(VIError):
    pass


class DegenerateFit(VIError):
    pass


class NonsmoothPoint(VIError):
    """A projection Jacobian was requested at an activity boundary."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class UnsupportedAnalytic(VIError):
    """No closed-form projection Jacobian exists for this set or point."""


class NonsmoothNeighborhood(VIError):
    """The solution's active pattern changes inside a finite-difference stencil."""


class UnsupportedDimension(VIError):
    pass
