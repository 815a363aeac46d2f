"""Exception types raised by the package.

Every error derives from :class:`MicrohomError` so callers (and the CLI) can
separate precondition failures from genuine bugs.
"""


class MicrohomError(Exception):
    pass


class PreconditionError(MicrohomError, ValueError):
    """Input violates a documented precondition."""


class GridMismatchError(PreconditionError):
    pass


class GeometryError(PreconditionError):
    pass


class AlignmentError(GeometryError):
    """eps, the macro grid and the periodicity lattice do not fit together."""


class MollifierError(PreconditionError):
    pass


class SphereConstraintError(PreconditionError):
    def __init__(self, message, max_deviation=float("nan")):
        super().__init__(message)
        self.max_deviation = max_deviation


class SupportError(PreconditionError):
    """A two-scale field is not supported where it has to be."""


class MarginError(PreconditionError):
    pass


class FieldIOError(MicrohomError, OSError):
    pass


class FieldFormatError(MicrohomError, ValueError):
    """Malformed TSF1/TS2F stream; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SolvabilityError(MicrohomError, ValueError):
    def __init__(self, message, mean):
        super().__init__(message)
        self.mean = mean


class ConvergenceError(MicrohomError, RuntimeError):
    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class ShiftSelectionError(MicrohomError, RuntimeError):
    def __init__(self, message, best_margin):
        super().__init__(message)
        self.best_margin = best_margin


class ExtensionError(MicrohomError, RuntimeError):
    pass
