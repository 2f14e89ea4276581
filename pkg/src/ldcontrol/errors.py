"""Exception types shared across modules."""


class DataError(ValueError):
    """Problem data violates a declared invariant."""


class ArgumentError(ValueError):
    """An operation was called outside its precondition."""


class SolverError(RuntimeError):
    """An iterative solve failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DependencyError(RuntimeError):
    """A required upstream result (e.g. a PDE solution) is missing."""


class EllipticityError(DataError):
    """A diffusion matrix is not positive definite."""
