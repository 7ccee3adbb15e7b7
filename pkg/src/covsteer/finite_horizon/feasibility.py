"""Reachability of a terminal covariance through output feedback."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import FiniteHorizonProblem, require_valid
from ..numerics import TimeGrid, integrate_riccati_forward, is_positive_definite

FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class FeasibilityCertificate:
    """``feasible`` iff ``lambda_min(Sigma_T - P(T)) > tol``."""

    P_T: np.ndarray
    gap: float
    feasible: bool
    tol: float = FEASIBILITY_TOL

    def to_dict(self) -> dict:
        return {"feasible": self.feasible, "gap": self.gap, "tol": self.tol, "P_T": self.P_T.tolist()}


def check_feasibility(problem: FiniteHorizonProblem, grid: TimeGrid | None = None,
                      tol: float = FEASIBILITY_TOL) -> FeasibilityCertificate:
    """Compare the target covariance with the terminal Kalman error covariance.

    The terminal covariance is reachable with ``u = -K(t) xhat`` when it
    strictly dominates ``P(T)``; ``Sigma_T >= P(T)`` is necessary for any
    output-adapted control.
    """
    require_valid(problem.system)
    if grid is None:
        grid = TimeGrid.horizon(problem.T, 1000)
    P_T = integrate_riccati_forward(problem.system, problem.initial.covariance, grid).terminal
    # the strict test runs on the difference directly
    ok, gap = is_positive_definite(problem.target.covariance - P_T, tol=tol)
    return FeasibilityCertificate(P_T, gap, bool(ok), tol)
