"""Finite-horizon and stationary Kalman-Bucy filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .model import LinearGaussianSystem
from .numerics import (
    CovariancePath,
    TimeGrid,
    integrate_riccati_forward,
    interpolate_nodes,
    is_hurwitz,
    solve_care,
)


@dataclass(frozen=True)
class FilterSchedule:
    """Error covariance ``P(t)`` and gain ``L(t) = P(t) C'(DD')^-1`` on a grid."""

    grid: TimeGrid
    P_path: CovariancePath
    L_path: np.ndarray

    @property
    def P_T(self) -> np.ndarray:
        return self.P_path.terminal

    def L_at(self, t: float) -> np.ndarray:
        return interpolate_nodes(self.grid, self.L_path, t)

    def innovation_forcing(self, system: LinearGaussianSystem) -> np.ndarray:
        """``L DD' L'`` at every node."""
        return self.L_path @ system.measurement_cov @ np.swapaxes(self.L_path, -1, -2)

    def subsample(self, stride: int) -> "FilterSchedule":
        P = self.P_path.subsample(stride)
        return FilterSchedule(P.grid, P, self.L_path[::stride])


@dataclass(frozen=True)
class StationaryFilter:
    P: np.ndarray
    L: np.ndarray

    def innovation_forcing(self, system: LinearGaussianSystem) -> np.ndarray:
        return self.L @ system.measurement_cov @ self.L.T


def build_filter_schedule(system: LinearGaussianSystem, Sigma0, grid: TimeGrid) -> FilterSchedule:
    """Integrate the filter Riccati equation from ``P(t0) = Sigma0``."""
    P_path = integrate_riccati_forward(system, Sigma0, grid)
    L_path = P_path.values @ system.gain_map
    return FilterSchedule(grid, P_path, L_path)


def build_stationary_filter(system: LinearGaussianSystem) -> StationaryFilter:
    P = solve_care(system)
    L = P @ system.gain_map
    stable, abscissa = is_hurwitz(system.A - L @ system.C)
    if not stable:
        raise PreconditionError(f"A - LC is not Hurwitz (abscissa {abscissa:.3e})")
    return StationaryFilter(P, L)
