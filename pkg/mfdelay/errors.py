"""Error types raised by the toolkit.

Every error carries the process exit code the command line reports for it.
"""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4


class MFDelayError(Exception):
    """Base class for all toolkit errors."""
    exit_code = EXIT_NUMERICAL


class GridError(MFDelayError, ValueError):
    """Thrown when a time grid cannot be built from the given step sizes."""
    exit_code = EXIT_VALIDATION


class GridRangeError(GridError, IndexError):
    """Thrown when a lookup falls outside the grid."""


class ModelError(MFDelayError, ValueError):
    """Thrown for malformed coefficient models or failed derivative probes."""
    exit_code = EXIT_VALIDATION


class ExpressionError(ModelError):
    """Thrown when a coefficient expression cannot be parsed."""

    def __init__(self, message, expression=None, position=None):
        self.expression = expression
        self.position = position
        if expression is not None and position is not None:
            message = f"{message} at position {position} in '{expression}'"
        super().__init__(message)


class SimulationError(MFDelayError, ArithmeticError):
    """Thrown when the forward state leaves the finite range."""

    def __init__(self, message, particle=None, step=None):
        self.particle = particle
        self.step = step
        super().__init__(message)


class SolverError(MFDelayError, ArithmeticError):
    """Thrown by the backward and adjoint solvers."""


class PreconditionError(MFDelayError, ValueError):
    """Thrown when an operation is called with arguments it does not accept."""
    exit_code = EXIT_VALIDATION


class ConfigValidationError(MFDelayError, ValueError):
    """Collects every problem found in an experiment file."""
    exit_code = EXIT_VALIDATION

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))
