"""Exception types raised across the package."""


class FPLearnError(Exception):
    """Base class for all package errors."""


class GridIndexError(FPLearnError, IndexError):
    pass


class DegenerateDynamicsError(FPLearnError, ValueError):
    """No drift and no diffusion: the time step is unbounded."""


class StabilityError(FPLearnError, ValueError):
    """Time step violates the CFL bound."""

    def __init__(self, message, admissible_dt=None):
        super().__init__(message)
        self.admissible_dt = admissible_dt


class NumericalError(FPLearnError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptyMeasureError(FPLearnError, ValueError):
    pass


class DisjointSupportError(FPLearnError, ValueError):
    pass


class InconsistentStateError(FPLearnError, ValueError):
    pass


class BlowUpError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(NumericalError):
    """Training produced a non-finite objective; carries the last good model."""

    def __init__(self, message, last_model=None, log=None):
        super().__init__(message)
        self.last_model = last_model
        self.log = log
