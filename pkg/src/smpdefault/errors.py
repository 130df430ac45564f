"""Exception hierarchy shared by the numerical modules."""


class SmpDefaultError(Exception):
    """Base class for all library errors."""


class InvalidInputError(SmpDefaultError, ValueError):
    pass


class DivergenceError(SmpDefaultError, ArithmeticError):
    """A forward scheme produced a non-finite state."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class NonConvergenceError(SmpDefaultError, RuntimeError):
    """A fixed-point iteration hit ``max_iter`` before reaching ``tol``.

    The successive-difference norms observed so far are kept on ``norms``.
    """

    def __init__(self, message, norms=()):
        super().__init__(message)
        self.norms = list(norms)


class RegressionError(SmpDefaultError, RuntimeError):
    def __init__(self, message, knot=None, stratum=None):
        super().__init__(message)
        self.knot = knot
        self.stratum = stratum


class BsdeStepError(SmpDefaultError, RuntimeError):
    def __init__(self, message, knot=None):
        super().__init__(message)
        self.knot = knot


class NonFiniteCostError(SmpDefaultError, ArithmeticError):
    def __init__(self, message, path_ids=()):
        super().__init__(message)
        self.path_ids = list(path_ids)


class ConfigError(SmpDefaultError, ValueError):
    """Malformed or invalid experiment configuration."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line
