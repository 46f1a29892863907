"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument is outside its documented domain."""


class UnsupportedParameterError(InvalidArgumentError):
    """A parameter combination the theory does not cover (e.g. ridgeless tau == 1)."""


class DegenerateInputError(ArithmeticError):
    """A denominator vanished while evaluating a closed-form expression."""


class ConvergenceError(RuntimeError):
    """An iterative solve stopped without meeting its tolerance.

    Attributes
    ----------
    residual : float
        Last residual seen before giving up.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class IllConditionedError(ArithmeticError):
    """The ridge system is numerically singular at the requested regularization."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class BoundaryError(InvalidArgumentError):
    """Evaluation requested exactly on a phase boundary.

    Carries the two one-sided limits so callers can still report them.
    """

    def __init__(self, message, below, above):
        super().__init__(message)
        self.below = below
        self.above = above
