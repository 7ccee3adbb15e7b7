"""Exception hierarchy shared by the solvers and the CLI."""

from __future__ import annotations


class CovsteerError(Exception):
    """Base class for all errors raised by covsteer."""


class DimensionError(CovsteerError, ValueError):
    """A matrix has a shape inconsistent with the rest of the problem data."""

    def __init__(self, name: str, message: str):
        self.name = name
        super().__init__(f"{name}: {message}")


class AssumptionError(CovsteerError, ValueError):
    """Structural assumption (controllability, observability, invertible D) violated."""


class PreconditionError(CovsteerError, ValueError):
    """An operation was called on inputs outside its domain."""


class IntegrationError(CovsteerError, ArithmeticError):
    """A fixed-step integration produced non-finite values."""

    def __init__(self, message: str, time: float):
        self.time = time
        super().__init__(f"{message} (t = {time:.6g})")


class RiccatiEscapeError(IntegrationError):
    """The backward control Riccati equation escaped in finite time."""


class ConvergenceError(CovsteerError, RuntimeError):
    """An iterative solver exhausted its budget.

    ``best`` carries whatever partial result the solver had (may be None),
    ``residual`` the best residual achieved.
    """

    def __init__(self, message: str, residual: float, best=None):
        self.residual = residual
        self.best = best
        super().__init__(f"{message} (best residual {residual:.3e})")


class InfeasibleError(CovsteerError):
    """The requested covariance cannot be reached or assigned."""

    def __init__(self, message: str, certificate=None):
        self.certificate = certificate
        super().__init__(message)


class SimulationError(CovsteerError, RuntimeError):
    """Too many Monte Carlo particles diverged."""
