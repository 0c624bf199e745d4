"""Exception types shared across the package."""


class OptrackError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(OptrackError, ValueError):
    """A vector/matrix does not match the dimensions a program expects.

    Carries the offending block index when one can be named.
    """

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class InvalidBlockError(OptrackError, IndexError):
    """A block index is out of range for the program's layout."""


class ModelError(OptrackError, ValueError):
    """Program or model data violates a structural invariant (e.g. a
    non-PSD diagonal Hessian block, unordered bounds)."""


class NumericsError(OptrackError, ArithmeticError):
    """Non-finite values appeared during iteration.

    ``context`` names where (block index, sweep index, ...).
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class NonConvergenceError(OptrackError, RuntimeError):
    """The reference solver ran out of iterations.

    Carries the best point seen and its residual so the caller can decide
    whether to accept it.
    """

    def __init__(self, message, point=None, residual=None, outer_iterations=None):
        super().__init__(message)
        self.point = point
        self.residual = residual
        self.outer_iterations = outer_iterations
