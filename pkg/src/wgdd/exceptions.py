"""Exception types raised by the solver stack."""


class WGError(Exception):
    """Base class for all package errors."""


class MeshError(WGError, ValueError):
    """Invalid mesh input or violated mesh invariant.

    ``lineno`` is set when the problem was found while reading a mesh file.
    """

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class RefinementError(WGError, ValueError):
    pass


class PartitionError(WGError, ValueError):
    pass


class QuadratureError(WGError, ValueError):
    pass


class ModelError(WGError, ValueError):
    """Coefficient bounds violated at a quadrature point."""


class SolverError(WGError, RuntimeError):
    """Factorization or back-solve failure."""


class DiagnosticError(WGError, AssertionError):
    """An energy identity checked at runtime did not hold."""
