"""Exception types raised by the solvers."""


class VSGError(Exception):
    """Base class for all package errors."""


class ParameterError(VSGError, ValueError):
    """A numeric parameter is outside its admissible range."""


class DimensionError(VSGError, ValueError):
    """Array shapes do not agree with the game."""


class GameKindError(VSGError, ValueError):
    """The game does not have the structure an operation requires."""


class ModeConflictError(VSGError, ValueError):
    """Evaluation mode and supplied arguments contradict each other."""


class DivergenceError(VSGError, ValueError):
    """KL divergence is infinite because of a support violation."""


class ConvergenceError(VSGError, RuntimeError):
    """An iterative solve hit its iteration cap or produced non-finite values."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class DegenerateWeightsError(VSGError, RuntimeError):
    """Importance weights collapsed; lower the reward scale or clip harder."""


class DegenerateFisherError(VSGError, RuntimeError):
    """Eigenvalue cutoff left no usable Fisher directions."""
