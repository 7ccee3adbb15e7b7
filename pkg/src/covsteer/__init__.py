"""Output-feedback covariance steering for linear Gaussian systems."""

from .errors import (
    AssumptionError,
    ConvergenceError,
    CovsteerError,
    DimensionError,
    InfeasibleError,
    IntegrationError,
    PreconditionError,
    RiccatiEscapeError,
    SimulationError,
)
from .model import (
    FiniteHorizonProblem,
    GaussianSpec,
    LinearGaussianSystem,
    StationaryProblem,
    validate_system,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionError",
    "ConvergenceError",
    "CovsteerError",
    "DimensionError",
    "FiniteHorizonProblem",
    "GaussianSpec",
    "InfeasibleError",
    "IntegrationError",
    "LinearGaussianSystem",
    "PreconditionError",
    "RiccatiEscapeError",
    "SimulationError",
    "StationaryProblem",
    "validate_system",
]
