"""Minimum-energy steering by shooting on the terminal value of the control Riccati equation.

For a symmetric ``Pi_T``, integrate ``Pi`` backward, then the filter-state
covariance

    Sigma_hat' = (A - BB'Pi) Sigma_hat + Sigma_hat (A - BB'Pi)' + L DD' L',
    Sigma_hat(0) = 0,

forward.  If ``Sigma_hat(T) = Sigma_T - P(T)`` the law ``u = -B'Pi(t) xhat``
is energy optimal among output-adapted controls.  ``Pi_T`` is found by a
damped Newton iteration with a finite-difference Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConvergenceError, InfeasibleError, PreconditionError, RiccatiEscapeError
from ..kalman import build_filter_schedule
from ..model import FiniteHorizonProblem, require_valid, symmetrize
from ..numerics import CovariancePath, SymCoords, TimeGrid, _control_riccati_sweep, _lyapunov_sweep
from .feasibility import check_feasibility
from .schedule import GainSchedule, trapezoid_cost

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShootingResult:
    Pi_T: np.ndarray
    Pi_path: CovariancePath
    Sigma_hat_path: CovariancePath
    residual: float
    iterations: int
    history: tuple[float, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "Pi_T": self.Pi_T.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "residual_history": list(self.history),
        }


class _Sweep:
    """The map ``Pi_T -> (Pi(t), Sigma_hat(t))`` on a fixed grid.

    Riccati sweeps run on the half-step grid so the RK4 Lyapunov stages see
    exact midpoint coefficients.
    """

    def __init__(self, problem: FiniteHorizonProblem, grid: TimeGrid):
        self.problem = problem
        self.grid = grid
        self.fine = grid.refined(2)
        sys = problem.system
        self.filter_fine = build_filter_schedule(sys, problem.initial.covariance, self.fine)
        self.Q_half = self.filter_fine.innovation_forcing(sys)
        self.target = problem.target.covariance - self.filter_fine.P_T

    def __call__(self, Pi_T: np.ndarray):
        sys = self.problem.system
        Pi_half = _control_riccati_sweep(sys, Pi_T, self.fine)
        A_half = sys.A - sys.input_weight @ Pi_half
        S = _lyapunov_sweep(A_half, self.Q_half, np.zeros((sys.n, sys.n)), self.grid, "filter-state covariance")
        return Pi_half, S


def sigma_hat_from_pi(problem: FiniteHorizonProblem, Pi_T, grid: TimeGrid) -> tuple[CovariancePath, CovariancePath]:
    """Backward control Riccati from ``Pi_T``, then the forward filter-state covariance."""
    Pi_T = symmetrize(np.asarray(Pi_T, dtype=float), "Pi_T")
    Pi_half, S = _Sweep(problem, grid)(Pi_T)
    return CovariancePath(grid, Pi_half[::2]), CovariancePath(grid, S)


def shoot(problem: FiniteHorizonProblem, grid: TimeGrid | None = None, *, max_iter: int = 50,
          tol_res: float | None = None, trust_radius: float = 10.0, fd_step: float = 1e-6,
          Pi_T0=None, check: bool = True) -> tuple[ShootingResult, GainSchedule]:
    """Find ``Pi_T`` with ``||Sigma_hat(T; Pi_T) - (Sigma_T - P(T))||_F <= tol_res``.

    Parameters
    ----------
    max_iter : int
        Newton iteration budget.
    tol_res : float, optional
        Residual tolerance; defaults to ``1e-8 * n``.
    trust_radius : float
        Initial cap on the Frobenius norm of a Newton step.  Shrunk when a
        trial ``Pi_T`` makes the backward Riccati sweep escape, grown after
        full steps.
    fd_step : float
        Relative central-difference step for the Jacobian.
    Pi_T0 : array_like, optional
        Starting guess (zero by default).

    Raises
    ------
    InfeasibleError
        If ``check`` and the target does not dominate ``P(T)``.
    ConvergenceError
        Budget exhausted; ``.best`` holds the best :class:`ShootingResult`.
    RiccatiEscapeError
        Every trial step escaped.
    """
    require_valid(problem.system)
    if grid is None:
        grid = TimeGrid.horizon(problem.T, 1000)
    if abs(grid.t0) > 0 or abs(grid.t1 - problem.T) > 1e-12 * problem.T:
        raise PreconditionError("grid must span [0, T]")
    if check:
        cert = check_feasibility(problem, grid)
        if not cert.feasible:
            raise InfeasibleError(f"target is not reachable (gap {cert.gap:.3e})", cert)

    n = problem.system.n
    tol_res = 1e-8 * n if tol_res is None else tol_res
    coords = SymCoords(n)
    sweep = _Sweep(problem, grid)
    target_v = coords.vec(sweep.target)

    theta = coords.vec(np.zeros((n, n)) if Pi_T0 is None else symmetrize(np.asarray(Pi_T0, float), "Pi_T0"))
    Pi_half, S = sweep(coords.mat(theta))
    r = coords.vec(S[-1]) - target_v
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    radius = float(trust_radius)
    it = 0

    def result():
        Pi_T = coords.mat(theta)
        return ShootingResult(Pi_T, CovariancePath(grid, Pi_half[::2]), CovariancePath(grid, S),
                              rnorm, it, tuple(history))

    while rnorm > tol_res:
        if it >= max_iter:
            raise ConvergenceError(f"shooting did not converge in {max_iter} iterations", rnorm, best=result())
        it += 1
        delta = fd_step * (1.0 + np.linalg.norm(theta))
        E = delta * np.eye(coords.dim)
        batch = coords.mat(np.concatenate([theta + E, theta - E]))
        _, Sb = sweep(batch)
        Rb = coords.vec(Sb[-1])
        J = (Rb[: coords.dim] - Rb[coords.dim:]).T / (2.0 * delta)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        snorm = np.linalg.norm(step)
        if snorm > radius:
            step *= radius / snorm
            snorm = radius

        alpha, escapes = 1.0, 0
        while True:
            cand = theta + alpha * step
            try:
                Pi_c, S_c = sweep(coords.mat(cand))
            except RiccatiEscapeError:
                escapes += 1
                radius = 0.25 * alpha * snorm
                alpha *= 0.5
                if escapes > 40:
                    raise
                continue
            r_c = coords.vec(S_c[-1]) - target_v
            rn_c = float(np.linalg.norm(r_c))
            if rn_c <= (1.0 - 1e-4 * alpha) * rnorm:
                break
            alpha *= 0.5
            if alpha < 1e-12:
                raise ConvergenceError("line search failed to reduce the residual", rnorm, best=result())
        if alpha == 1.0 and escapes == 0:
            radius = max(radius, 2.0 * snorm)
        theta, Pi_half, S, r, rnorm = cand, Pi_c, S_c, r_c, rn_c
        history.append(rnorm)
        log.debug("shoot iter %d: residual %.3e step %.3e alpha %.3g", it, rnorm, snorm, alpha)

    res = result()
    sys = problem.system
    K_half = sys.B.T @ Pi_half
    K_nodes = K_half[::2]
    filt = sweep.filter_fine.subsample(2)
    cost = trapezoid_cost(grid, K_nodes, S)
    schedule = GainSchedule(grid, K_nodes, filt, res.Sigma_hat_path, cost, "shooting",
                            K_half=K_half, L_half=sweep.filter_fine.L_path)
    return res, schedule
