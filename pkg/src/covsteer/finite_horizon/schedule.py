"""Time-varying gain schedules and their cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kalman import FilterSchedule
from ..model import FiniteHorizonProblem
from ..numerics import CovariancePath, TimeGrid, _lyapunov_sweep, half_step_samples, interpolate_nodes


@dataclass(frozen=True)
class GainSchedule:
    """Output-feedback law ``u = -K(t) xhat(t)`` on a grid.

    ``sigma_hat`` is the covariance of the filter state under this gain.
    ``K_half``/``L_half`` optionally hold the gains at half steps
    (``2N+1`` samples) when the producer computed them; consumers that need
    midpoint values fall back to linear interpolation otherwise.
    """

    grid: TimeGrid
    K_path: np.ndarray
    filter: FilterSchedule
    sigma_hat: CovariancePath
    expected_cost: float
    solver: str = "shooting"
    K_half: np.ndarray | None = None
    L_half: np.ndarray | None = None

    def __post_init__(self):
        if self.filter.grid != self.grid or self.sigma_hat.grid != self.grid:
            raise ValueError("gain, filter and covariance paths must share one grid")
        if self.K_path.shape[0] != len(self.grid):
            raise ValueError("K_path must have one matrix per grid node")
        if not self.expected_cost >= 0.0:
            raise ValueError(f"expected cost must be nonnegative, got {self.expected_cost}")

    def K_at(self, t: float) -> np.ndarray:
        return interpolate_nodes(self.grid, self.K_path, t)

    def L_at(self, t: float) -> np.ndarray:
        return self.filter.L_at(t)


def evaluate_expected_cost(schedule: GainSchedule) -> float:
    """Trapezoid rule for ``int trace(K Sigma_hat K') dt``."""
    return trapezoid_cost(schedule.grid, schedule.K_path, schedule.sigma_hat.values)


def trapezoid_cost(grid: TimeGrid, K: np.ndarray, S: np.ndarray) -> float:
    integrand = np.einsum("kij,kjl,kil->k", K, S, K)
    return float(max(grid.trapezoid_weights() @ integrand, 0.0))


def joint_covariance_path(problem: FiniteHorizonProblem, schedule: GainSchedule) -> tuple[CovariancePath, CovariancePath]:
    """Covariance of ``[x; x - xhat]`` under the closed loop, integrated as one 2n x 2n ODE.

    Returns the state covariance ``Sigma(t)`` and error covariance ``P(t)``
    blocks.  Independent of the ``Sigma_hat`` bookkeeping used by the solvers.
    """
    sys = problem.system
    n, grid = sys.n, schedule.grid
    K = schedule.K_half if schedule.K_half is not None else half_step_samples(schedule.K_path, grid, n)
    L = schedule.L_half if schedule.L_half is not None else half_step_samples(schedule.filter.L_path, grid, n)
    J = K.shape[0]
    A_big = np.zeros((J, 2 * n, 2 * n))
    BK = sys.B @ K
    A_big[:, :n, :n] = sys.A - BK
    A_big[:, :n, n:] = BK
    A_big[:, n:, n:] = sys.A - L @ sys.C
    Q_big = np.zeros((J, 2 * n, 2 * n))
    Qw = sys.process_noise
    Q_big[:, :n, :n] = Qw
    Q_big[:, :n, n:] = Qw
    Q_big[:, n:, :n] = Qw
    Q_big[:, n:, n:] = Qw + L @ sys.measurement_cov @ np.swapaxes(L, -1, -2)
    S0 = np.tile(problem.initial.covariance, (2, 2))
    big = _lyapunov_sweep(A_big, Q_big, S0, grid, "joint covariance")
    return CovariancePath(grid, big[:, :n, :n]), CovariancePath(grid, big[:, n:, n:])
