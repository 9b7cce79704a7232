"""Exception hierarchy. CLI exit codes: 1 usage, 2 infeasibility, 3 numerics."""


class FbsdeError(Exception):
    """Base class for all library errors."""


class UsageError(FbsdeError):
    """Bad user input: unknown problem, malformed flags, contract misuse."""

    exit_code = 1


class GridMismatchError(UsageError):
    """Operands live on different time grids."""


class JunctionMismatchError(UsageError):
    """Path concatenation junction values disagree beyond tolerance."""


class InfeasibleError(FbsdeError):
    """Mathematical infeasibility: small-time condition or contraction planning fails."""

    exit_code = 2

    def __init__(self, message, blocking_time=None, reason=None):
        super().__init__(message)
        self.blocking_time = blocking_time
        self.reason = reason or message


class NumericalError(FbsdeError):
    """Runtime numerical failure: non-finite states, regression breakdown, non-convergence."""

    exit_code = 3


class SimulationError(NumericalError):
    """Forward simulation produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RegressionError(NumericalError):
    """Least-squares conditional expectation could not be fit."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(NumericalError):
    """Picard iteration failed to reach the fixed-point tolerance."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])
