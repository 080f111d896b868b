"""Exception types shared across the toolkit."""


class StructSparseError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(StructSparseError, ValueError):
    """Malformed structure, spec, or argument."""


class CapacityError(StructSparseError, ValueError):
    """An exhaustive or enumerative routine was asked to exceed its guard."""


class InfeasibleError(StructSparseError, ValueError):
    """The requested quantity is infinite or undefined for this input."""


class UnsupportedStructureError(StructSparseError, ValueError):
    """The operation does not apply to this group structure."""


class ConvergenceError(StructSparseError, RuntimeError):
    """An iterative routine failed to reach its tolerance.

    Carries the last residual and the iteration count so callers can
    report or retry with a looser tolerance.
    """

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InternalError(StructSparseError, RuntimeError):
    """An internal consistency check failed (signals a broken inner solve)."""


class DataError(StructSparseError, ValueError):
    """Unreadable or inconsistent input data."""
