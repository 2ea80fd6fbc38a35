"""Exception types shared across the package."""


class NumericError(ValueError):
    """Raised when an input or intermediate value is numerically invalid
    (non-finite inputs, nonpositive Rayleigh quotients, and similar)."""


class StructureError(ValueError):
    """Raised when shapes, lengths, or configurations are inconsistent."""


class DivergenceError(RuntimeError):
    """Raised when an optimization loop produces a non-finite loss.

    Carries the last parameter state observed with a finite loss so callers
    can recover or checkpoint it.
    """

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
