"""Exception hierarchy shared by the solver modules."""


class RobustBsdeError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RobustBsdeError, ValueError):
    pass


class SingularVolatilityError(RobustBsdeError):
    """Volatility matrix not invertible (or too ill-conditioned) at a cell."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class NumericBlowupError(RobustBsdeError, FloatingPointError):
    """Non-finite or capped-out values during a simulation or backward sweep."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class BoundViolationError(RobustBsdeError):
    """A coefficient exceeded its declared bound."""


class InvalidBoundsError(RobustBsdeError, ValueError):
    """Lower ambiguity bound above the upper one."""
