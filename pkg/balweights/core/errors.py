class BalanceError(ValueError):
    """Base class for every error raised by the toolkit."""


class InputError(BalanceError):
    pass


class SingularSystemError(BalanceError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(BalanceError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = tuple(trace)


class InfeasibleError(ConvergenceError):
    pass


class VerificationError(BalanceError):
    """A primal/dual or oracle check failed."""
