"""Exception hierarchy shared by every module."""


class NFMCError(Exception):
    """Base class for all toolkit errors."""


class NumericalError(NFMCError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``location`` identifies where (tape node index, flow layer index or
    integration step), when known.
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class ContractViolation(NFMCError, ValueError):
    pass


class InputError(NFMCError, ValueError):
    pass


class SpecError(NFMCError, ValueError):
    pass


class DataError(NFMCError, ValueError):
    pass


class ConfigError(NFMCError, ValueError):
    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class MomentsUnavailable(NFMCError, LookupError):
    pass


class ConvergenceError(NFMCError, RuntimeError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class TrainingDiverged(NFMCError, RuntimeError):
    pass


class DivergentTrajectory(NFMCError, RuntimeError):
    pass


class DegenerateRanks(NFMCError, ValueError):
    pass
