"""Matrix-equation kernels.

Fixed-step RK4 for symmetric matrix ODEs (Riccati and Lyapunov), the
stabilizing filter ARE by Newton-Kleinman, the algebraic Lyapunov equation,
and a few spectral tests.  The integration kernels accept leading batch
dimensions so that several boundary values can be swept at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import ConvergenceError, IntegrationError, PreconditionError, RiccatiEscapeError
from .model import LinearGaussianSystem, symmetrize

HURWITZ_TOL = 1e-10
ESCAPE_NORM = 1e8


def _T(X: np.ndarray) -> np.ndarray:
    return np.swapaxes(X, -1, -2)


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + _T(X))


class SymCoords:
    """Isometry between symmetric n x n matrices (Frobenius) and R^{n(n+1)/2}."""

    def __init__(self, n: int):
        self.n = n
        self.iu = np.triu_indices(n)
        self.w = np.where(self.iu[0] == self.iu[1], 1.0, np.sqrt(2.0))

    @property
    def dim(self) -> int:
        return self.w.size

    def vec(self, M: np.ndarray) -> np.ndarray:
        return M[..., self.iu[0], self.iu[1]] * self.w

    def mat(self, v: np.ndarray) -> np.ndarray:
        M = np.zeros(v.shape[:-1] + (self.n, self.n))
        M[..., self.iu[0], self.iu[1]] = v / self.w
        M[..., self.iu[1], self.iu[0]] = v / self.w
        return M


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = t0 + k (t1 - t0) / steps``, ``k = 0..steps``."""

    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not (self.t1 > self.t0):
            raise PreconditionError(f"grid needs t1 > t0, got [{self.t0}, {self.t1}]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise PreconditionError(f"grid needs a positive integer step count, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def horizon(cls, T: float, steps: int) -> "TimeGrid":
        return cls(0.0, float(T), steps)

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.steps + 1)

    def __len__(self) -> int:
        return self.steps + 1

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.t1, self.steps * factor)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


@dataclass(frozen=True)
class CovariancePath:
    """Symmetric matrices sampled on the nodes of a :class:`TimeGrid`."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != len(self.grid) or values.shape[1] != values.shape[2]:
            raise PreconditionError(
                f"path values must have shape ({len(self.grid)}, n, n), got {values.shape}"
            )
        scale = 1.0 + np.abs(values).max()
        if np.abs(values - _T(values)).max() > 1e-10 * scale:
            raise PreconditionError("path values are not symmetric")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, k):
        return self.values[k]

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between nodes."""
        return interpolate_nodes(self.grid, self.values, t)

    def subsample(self, stride: int) -> "CovariancePath":
        if self.grid.steps % stride:
            raise PreconditionError(f"stride {stride} does not divide {self.grid.steps} steps")
        coarse = TimeGrid(self.grid.t0, self.grid.t1, self.grid.steps // stride)
        return CovariancePath(coarse, self.values[::stride])


def interpolate_nodes(grid: TimeGrid, values: np.ndarray, t: float) -> np.ndarray:
    s = (t - grid.t0) / grid.h
    s = min(max(s, 0.0), float(grid.steps))
    k = min(int(np.floor(s)), grid.steps - 1)
    w = s - k
    return (1.0 - w) * values[k] + w * values[k + 1]


def _check_finite(X: np.ndarray, t: float, what: str):
    if not np.all(np.isfinite(X)):
        raise IntegrationError(f"{what} diverged", t)


def _rk4_autonomous(f: Callable, S0: np.ndarray, h: float, steps: int, t0: float, what: str) -> np.ndarray:
    out = np.empty((steps + 1,) + S0.shape)
    S = _sym(S0)
    out[0] = S
    for k in range(steps):
        k1 = f(S)
        k2 = f(S + 0.5 * h * k1)
        k3 = f(S + 0.5 * h * k2)
        k4 = f(S + h * k3)
        S = _sym(S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        _check_finite(S, t0 + (k + 1) * h, what)
        out[k + 1] = S
    return out


def riccati_filter_rhs(system: LinearGaussianSystem):
    A, Qw, W = system.A, system.process_noise, system.output_weight

    def f(P):
        AP = A @ P
        return AP + _T(AP) + Qw - P @ W @ P

    return f


def integrate_riccati_forward(system: LinearGaussianSystem, P0, grid: TimeGrid) -> CovariancePath:
    """Error covariance of the Kalman filter, ``P' = AP + PA' + B1B1' - PC'(DD')^-1CP``."""
    P0 = symmetrize(np.asarray(P0, dtype=float), "P0")
    if np.linalg.eigvalsh(P0)[0] < -1e-12 * (1.0 + np.abs(P0).max()):
        raise PreconditionError("P0 must be positive semidefinite")
    values = _rk4_autonomous(riccati_filter_rhs(system), P0, grid.h, grid.steps, grid.t0, "filter Riccati")
    return CovariancePath(grid, values)


def _control_riccati_sweep(system: LinearGaussianSystem, Pi_T: np.ndarray, grid: TimeGrid,
                           escape_norm: float = ESCAPE_NORM) -> np.ndarray:
    """Backward sweep of ``Pi' = -A'Pi - Pi A + Pi BB' Pi``; batched over leading dims.

    Returns node values in forward time order.
    """
    A, BB = system.A, system.input_weight
    h, N = grid.h, grid.steps
    bound = escape_norm * (1.0 + np.abs(Pi_T).max())

    def g(Pi):  # d Pi / d(T - t)
        PA = Pi @ A
        return PA + _T(PA) - Pi @ BB @ Pi

    out = np.empty((N + 1,) + Pi_T.shape)
    Pi = _sym(Pi_T)
    out[N] = Pi
    for k in range(N):
        k1 = g(Pi)
        k2 = g(Pi + 0.5 * h * k1)
        k3 = g(Pi + 0.5 * h * k2)
        k4 = g(Pi + h * k3)
        Pi = _sym(Pi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        t = grid.t1 - (k + 1) * h
        if not np.all(np.isfinite(Pi)) or np.abs(Pi).max() > bound:
            raise RiccatiEscapeError("control Riccati equation escaped", t)
        out[N - k - 1] = Pi
    return out


def integrate_control_riccati_backward(system: LinearGaussianSystem, Pi_T, grid: TimeGrid) -> CovariancePath:
    """Solve the control Riccati equation backward from ``Pi(t1) = Pi_T``.

    ``Pi_T`` only needs to be symmetric.  Finite-time escape raises
    :class:`RiccatiEscapeError` carrying the time where the sweep blew up.
    """
    Pi_T = symmetrize(np.asarray(Pi_T, dtype=float), "Pi_T")
    return CovariancePath(grid, _control_riccati_sweep(system, Pi_T, grid))


def _lyapunov_sweep(A_half: np.ndarray, Q_half: np.ndarray, S0: np.ndarray, grid: TimeGrid,
                    what: str = "Lyapunov") -> np.ndarray:
    """RK4 for ``S' = A(t)S + SA(t)' + Q(t)`` with coefficients given at half steps.

    ``A_half[j]`` and ``Q_half[j]`` are the coefficients at ``t0 + j h/2``,
    ``j = 0..2N``; the remaining dims broadcast against ``S0``.
    """
    h, N = grid.h, grid.steps

    def f(A, Q, S):
        AS = A @ S
        return AS + _T(AS) + Q

    S = _sym(np.broadcast_to(S0, np.broadcast_shapes(S0.shape, A_half.shape[1:])).astype(float))
    out = np.empty((N + 1,) + S.shape)
    out[0] = S
    for k in range(N):
        j = 2 * k
        k1 = f(A_half[j], Q_half[j], S)
        k2 = f(A_half[j + 1], Q_half[j + 1], S + 0.5 * h * k1)
        k3 = f(A_half[j + 1], Q_half[j + 1], S + 0.5 * h * k2)
        k4 = f(A_half[j + 2], Q_half[j + 2], S + h * k3)
        S = _sym(S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        _check_finite(S, grid.t0 + (k + 1) * h, what)
        out[k + 1] = S
    return out


def half_step_samples(coef, grid: TimeGrid, n: int) -> np.ndarray:
    """Sample a coefficient at ``t0 + j h/2``.

    ``coef`` may be a constant ``n x n`` matrix, a callable of time, an array
    of ``N+1`` node values (linearly interpolated at midpoints) or an array of
    ``2N+1`` half-step values (used as is).
    """
    N = grid.steps
    if callable(coef):
        ts = grid.t0 + 0.5 * grid.h * np.arange(2 * N + 1)
        return np.stack([np.asarray(coef(t), dtype=float) for t in ts])
    arr = np.asarray(coef, dtype=float)
    if arr.ndim == 2:
        return np.broadcast_to(arr, (2 * N + 1, n, n))
    if arr.ndim == 3 and arr.shape[0] == 2 * N + 1:
        return arr
    if arr.ndim == 3 and arr.shape[0] == N + 1:
        out = np.empty((2 * N + 1,) + arr.shape[1:])
        out[0::2] = arr
        out[1::2] = 0.5 * (arr[:-1] + arr[1:])
        return out
    raise PreconditionError(
        f"coefficient must be n x n, ({N + 1}, n, n) or ({2 * N + 1}, n, n); got {arr.shape}"
    )


def integrate_lyapunov_forward(A_of_t, Q_of_t, S0, grid: TimeGrid) -> CovariancePath:
    """Solve ``S' = A(t)S + SA(t)' + Q(t)`` forward from ``S(t0) = S0``."""
    S0 = symmetrize(np.asarray(S0, dtype=float), "S0")
    n = S0.shape[0]
    A_half = half_step_samples(A_of_t, grid, n)
    Q_half = _sym(half_step_samples(Q_of_t, grid, n))
    return CovariancePath(grid, _lyapunov_sweep(A_half, Q_half, S0, grid))


def expm(M, t: float = 1.0) -> np.ndarray:
    """``exp(M t)`` by scaling and squaring with a Pade approximant."""
    return linalg.expm(np.asarray(M, dtype=float) * t)


def spectral_abscissa(M) -> float:
    return float(np.max(np.linalg.eigvals(np.asarray(M, dtype=float)).real))


def is_hurwitz(M, tol: float = HURWITZ_TOL) -> tuple[bool, float]:
    """Return ``(stable, abscissa)``; stable iff every eigenvalue has real part ``< -tol``."""
    a = spectral_abscissa(M)
    return a < -tol, a


def is_positive_definite(M, tol: float = 0.0) -> tuple[bool, float]:
    """Return ``(M - tol I succeeds Cholesky, smallest eigenvalue of M)``."""
    M = 0.5 * (np.asarray(M, dtype=float) + np.asarray(M, dtype=float).T)
    lam_min = float(np.linalg.eigvalsh(M)[0])
    try:
        np.linalg.cholesky(M - tol * np.eye(M.shape[0]))
    except np.linalg.LinAlgError:
        return False, lam_min
    return lam_min > tol, lam_min


def solve_algebraic_lyapunov(A_cl, Q) -> np.ndarray:
    """Solve ``A_cl S + S A_cl' + Q = 0`` for Hurwitz ``A_cl``."""
    A_cl = np.asarray(A_cl, dtype=float)
    Q = 0.5 * (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T)
    stable, abscissa = is_hurwitz(A_cl)
    if not stable:
        raise PreconditionError(f"A_cl is not Hurwitz (spectral abscissa {abscissa:.3e})")
    S = _sym(linalg.solve_continuous_lyapunov(A_cl, -Q))
    for _ in range(3):
        R = A_cl @ S + S @ A_cl.T + Q
        if np.linalg.norm(R) <= 1e-10 * (1.0 + np.linalg.norm(S)):
            return S
        S = _sym(S + linalg.solve_continuous_lyapunov(A_cl, -R))
    res = np.linalg.norm(A_cl @ S + S @ A_cl.T + Q)
    raise ConvergenceError("Lyapunov solve did not reach tolerance", res, best=S)


def care_residual(system: LinearGaussianSystem, P) -> np.ndarray:
    A = system.A
    return A @ P + P @ A.T + system.process_noise - P @ system.output_weight @ P


def _stabilizing_filter_gain(system: LinearGaussianSystem) -> np.ndarray:
    """Gain L with A - LC Hurwitz (Bass' construction on the dual pair)."""
    A, C = system.A, system.C
    if is_hurwitz(A)[0]:
        return np.zeros((system.n, system.p))
    beta = 1.0 + np.linalg.norm(A, 2)
    Ab = -(A.T + beta * np.eye(system.n))
    Z = _sym(linalg.solve_continuous_lyapunov(Ab, -2.0 * C.T @ C))
    return np.linalg.solve(Z, C.T)


def solve_care(system: LinearGaussianSystem, tol: float = 1e-9, max_iter: int = 100) -> np.ndarray:
    """Stabilizing solution of ``AP + PA' + B1B1' - PC'(DD')^-1CP = 0``.

    Newton-Kleinman iteration started from a stabilizing filter gain.
    """
    A, C = system.A, system.C
    R = system.measurement_cov
    Qw = system.process_noise
    L = _stabilizing_filter_gain(system)
    P = np.zeros_like(A)
    res = np.inf
    for _ in range(max_iter):
        Acl = A - L @ C
        P_new = _sym(linalg.solve_continuous_lyapunov(Acl, -(Qw + L @ R @ L.T)))
        step = np.linalg.norm(P_new - P)
        P = P_new
        L = P @ system.gain_map
        res = np.linalg.norm(care_residual(system, P))
        if res <= 0.01 * tol * (1.0 + np.linalg.norm(P)) or step <= 1e-15 * (1.0 + np.linalg.norm(P)):
            break
    if not np.isfinite(res) or res > tol * (1.0 + np.linalg.norm(P)):
        raise ConvergenceError("Newton-Kleinman did not converge", float(res), best=P)
    return P
