"""
Exceptions raised by the mpct package.

Every error derives from MPCTError, which is a ValueError so callers that only
care about "bad input" can keep catching ValueError.
"""


class MPCTError(ValueError):
    """ Base class for all solver, problem and simulation errors. """


class DimensionMismatch(MPCTError):
    pass


class NotPositiveDefinite(MPCTError):
    """
    A matrix that must be symmetric positive definite is not.

    Parameters
    ----------
    where : str or int
        name of the matrix ("Q", "R", ...) or the block/row index at which the
        Cholesky pivot broke down
    """
    def __init__(self, where, message=None):
        self.where = where
        super().__init__(message or 'matrix not positive definite at {}'.format(where))


class SingularSmallSystem(MPCTError):
    pass


class InvalidBounds(MPCTError):
    def __init__(self, field, message=None):
        self.field = field
        super().__init__(message or 'invalid bounds for {}'.format(field))


class InvalidInterval(MPCTError):
    pass


class InvalidParameter(MPCTError):
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or 'invalid parameter {}'.format(name))


class Infeasible(MPCTError):
    pass


class NotConverged(MPCTError):
    def __init__(self, tol, message=None):
        self.tol = tol
        super().__init__(message or 'did not reach tolerance {:g}'.format(tol))


class AbortedInfeasible(MPCTError):
    """
    Closed-loop run stopped because the hard-constrained problem could not be
    solved. The partial trace is kept on the exception.
    """
    def __init__(self, step, trace=None):
        self.step = step
        self.trace = trace
        super().__init__('hard-constrained problem infeasible at step {}'.format(step))


class ProblemFileError(MPCTError):
    """ A problem definition file is malformed; `field` names the culprit. """
    def __init__(self, field, message):
        self.field = field
        super().__init__('{}: {}'.format(field, message))
