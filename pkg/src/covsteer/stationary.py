"""Assigning a stationary state covariance with a static output-feedback gain.

With the stationary Kalman filter (error covariance ``P``, gain ``L``) and
``u = -K xhat``, a covariance ``Sigma`` is stationary for the closed loop iff
``A - BK`` is Hurwitz and

    A Sigma + Sigma A' + B1 B1' + B X' + X B' = 0,   X = -(Sigma - P) K'.

So ``Sigma`` is assignable when this linear equation in ``X`` is solvable and
``Sigma - P`` is positive definite; then ``K = -X' (Sigma - P)^-1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import PreconditionError
from .kalman import StationaryFilter, build_stationary_filter
from .model import StationaryProblem, require_valid
from .numerics import SymCoords, is_hurwitz, solve_algebraic_lyapunov

log = logging.getLogger(__name__)

GAP_TOL = 1e-9
HURWITZ_MARGIN = 1e-6
DEFAULT_EPSILON = 1e-2


@dataclass(frozen=True)
class StationaryCertificate:
    """Outcome of the assignability test for ``problem.target``.

    ``X`` is the minimum-norm least-squares solution of the linear equation
    above; ``residual`` is its Frobenius residual and ``rank_ok`` says whether
    that residual is at round-off level.
    """

    Sigma: np.ndarray
    filter: StationaryFilter
    gap: float
    X: np.ndarray
    residual: float
    rank_ok: bool
    tol: float = GAP_TOL

    @property
    def P(self) -> np.ndarray:
        return self.filter.P

    @property
    def assignable(self) -> bool:
        return self.rank_ok and self.gap > self.tol

    def diagnosis(self) -> str:
        if self.assignable:
            return "assignable"
        reasons = []
        if not self.rank_ok:
            reasons.append(f"rank condition fails (Lyapunov residual {self.residual:.3e})")
        if self.gap <= self.tol:
            reasons.append(f"Sigma - P is not positive definite (min eigenvalue {self.gap:.3e})")
        return "; ".join(reasons)

    def to_dict(self) -> dict:
        return {
            "assignable": self.assignable,
            "rank_ok": self.rank_ok,
            "gap": self.gap,
            "lyapunov_residual": self.residual,
            "P": self.P,
            "X": self.X,
            "Sigma": self.Sigma,
            "diagnosis": self.diagnosis(),
        }


@dataclass(frozen=True)
class StationaryController:
    K: np.ndarray
    filter: StationaryFilter
    hurwitz: bool
    epsilon: float
    Sigma_achieved: np.ndarray
    power: float
    X: np.ndarray | None = None
    abscissa: float = float("nan")
    method: str = "direct"

    @property
    def L(self) -> np.ndarray:
        return self.filter.L

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "L": self.L,
            "P": self.filter.P,
            "X": self.X,
            "power": self.power,
            "hurwitz": self.hurwitz,
            "spectral_abscissa": self.abscissa,
            "epsilon": self.epsilon,
            "Sigma_achieved": self.Sigma_achieved,
            "method": self.method,
        }


def _lyapunov_operator(B: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> B X' + X B'`` from row-major ``vec(X)`` to ``svec``."""
    n, m = B.shape
    coords = SymCoords(n)
    E = np.eye(n * m).reshape(n * m, n, m)
    return coords.vec(B @ np.swapaxes(E, 1, 2) + E @ B.T).T


def _rhs(problem: StationaryProblem) -> np.ndarray:
    sys, S = problem.system, problem.target.covariance
    return sys.A @ S + S @ sys.A.T + sys.process_noise


def certify_stationary(problem: StationaryProblem, tol: float = GAP_TOL) -> StationaryCertificate:
    """Test whether ``problem.target`` can be a stationary state covariance."""
    sys = problem.system
    require_valid(sys)
    filt = build_stationary_filter(sys)
    Sigma = problem.target.covariance
    gap = float(np.linalg.eigvalsh(Sigma - filt.P)[0])

    coords = SymCoords(sys.n)
    M = _lyapunov_operator(sys.B)
    w = coords.vec(_rhs(problem))
    x = np.linalg.lstsq(M, -w, rcond=None)[0]
    residual = float(np.linalg.norm(M @ x + w))
    rank_ok = residual <= 1e-9 * (1.0 + np.linalg.norm(Sigma))
    X = x.reshape(sys.n, sys.m)
    return StationaryCertificate(Sigma, filt, gap, X, residual, bool(rank_ok), tol)


def _controller(problem, filt, K, X, epsilon, Sigma_achieved, method) -> StationaryController:
    sys = problem.system
    stable, abscissa = is_hurwitz(sys.A - sys.B @ K)
    S_hat = Sigma_achieved - filt.P
    power = max(float(np.trace(K @ S_hat @ K.T)), 0.0)
    return StationaryController(K, filt, bool(stable), float(epsilon), Sigma_achieved, power, X, abscissa, method)


def _gain_from_X(cert: StationaryCertificate, X: np.ndarray) -> np.ndarray:
    S_hat = cert.Sigma - cert.P
    return -linalg.solve(S_hat, X, assume_a="pos").T


def _check_linearcons(problem, cert, K):
    sys = problem.system
    S_hat = cert.Sigma - cert.P
    R = _rhs(problem) - sys.B @ K @ S_hat - S_hat @ K.T @ sys.B.T
    res = np.linalg.norm(R)
    if res > 1e-8 * (1.0 + np.linalg.norm(cert.Sigma)):
        raise PreconditionError(f"gain does not reproduce the target covariance (residual {res:.3e})")


def synthesize_gain(certificate: StationaryCertificate, problem: StationaryProblem,
                    X=None) -> StationaryController:
    """``K = -X'(Sigma - P)^-1`` from an assignability certificate.

    ``X`` overrides the certificate's minimum-norm solution (it must solve
    the same linear equation).
    """
    if not certificate.assignable:
        raise PreconditionError(f"target is not assignable: {certificate.diagnosis()}")
    X = certificate.X if X is None else np.asarray(X, dtype=float)
    K = _gain_from_X(certificate, X)
    _check_linearcons(problem, certificate, K)
    return _controller(problem, certificate.filter, K, X, 0.0, certificate.Sigma, "direct")


def regularize_epsilon(controller: StationaryController, problem: StationaryProblem,
                       epsilon: float = DEFAULT_EPSILON, *, margin: float = HURWITZ_MARGIN,
                       max_doublings: int = 40) -> StationaryController:
    """Perturb the gain to ``K + (eps/2) B' Sigma_hat^-1`` and return the covariance it achieves.

    The closed loop of the perturbed gain is Hurwitz for every ``eps > 0`` in
    exact arithmetic.  If the computed stability margin is below ``margin``,
    ``eps`` is doubled until it is not.
    """
    if not epsilon > 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    sys = problem.system
    filt = controller.filter
    S_hat = problem.target.covariance - filt.P
    if np.linalg.eigvalsh(S_hat)[0] <= 0:
        raise PreconditionError("Sigma - P is not positive definite")
    correction = 0.5 * linalg.solve(S_hat, sys.B, assume_a="pos").T
    eps = float(epsilon)
    for _ in range(max_doublings + 1):
        K_eps = controller.K + eps * correction
        stable, abscissa = is_hurwitz(sys.A - sys.B @ K_eps, tol=margin)
        if stable:
            break
        log.debug("epsilon %.3e leaves abscissa %.3e; doubling", eps, abscissa)
        eps *= 2.0
    else:
        raise PreconditionError(f"no epsilon up to {eps:.3e} gives a Hurwitz margin of {margin}")
    S_eps_hat = solve_algebraic_lyapunov(sys.A - sys.B @ K_eps, filt.innovation_forcing(sys))
    Sigma_eps = filt.P + S_eps_hat
    Sigma_eps = 0.5 * (Sigma_eps + Sigma_eps.T)
    return _controller(problem, filt, K_eps, controller.X, eps, Sigma_eps, controller.method + "+epsilon")


def min_power_X(certificate: StationaryCertificate, problem: StationaryProblem,
                weight: str = "sigma_hat") -> np.ndarray:
    """Minimize ``trace(X' W^-1 X)`` over solutions of the linear equation.

    ``weight`` is ``"sigma_hat"`` (``W = Sigma - P``, the control power) or
    ``"sigma"`` (``W = Sigma``).
    """
    if weight == "sigma_hat":
        W = certificate.Sigma - certificate.P
    elif weight == "sigma":
        W = certificate.Sigma
    else:
        raise ValueError(f"weight must be 'sigma_hat' or 'sigma', got {weight!r}")
    sys = problem.system
    n, m = sys.n, sys.m
    M = _lyapunov_operator(sys.B)
    x0 = certificate.X.reshape(-1)
    N = linalg.null_space(M)
    if N.shape[1] == 0:
        return certificate.X.copy()
    # trace(X' G X) = x' (G kron I_m) x for row-major x
    H = np.kron(linalg.inv(W), np.eye(m))
    H = 0.5 * (H + H.T)
    z = linalg.solve(N.T @ H @ N, -N.T @ H @ x0, assume_a="pos")
    return (x0 + N @ z).reshape(n, m)


def solve_min_power(problem: StationaryProblem, *, weight: str = "sigma_hat",
                    epsilon: float = DEFAULT_EPSILON, certificate: StationaryCertificate | None = None
                    ) -> StationaryController:
    """Least-power static gain assigning ``problem.target``.

    Falls back to :func:`regularize_epsilon` when the optimal gain does not
    stabilize the loop.
    """
    cert = certify_stationary(problem) if certificate is None else certificate
    if not cert.assignable:
        raise PreconditionError(f"target is not assignable: {cert.diagnosis()}")
    X = min_power_X(cert, problem, weight)
    ctrl = synthesize_gain(cert, problem, X)
    ctrl = StationaryController(**{**ctrl.__dict__, "method": "min-power"})
    if not ctrl.hurwitz:
        log.info("min-power gain is not stabilizing; applying epsilon regularization")
        ctrl = regularize_epsilon(ctrl, problem, epsilon)
    return ctrl


@dataclass(frozen=True)
class Proposition1Report:
    Pi: np.ndarray
    factor_residual: float
    hurwitz: bool
    abscissa: float
    lyapunov_residual: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_proposition1(controller: StationaryController, problem: StationaryProblem,
                        tol: float = 1e-8) -> Proposition1Report:
    """Check whether ``K = B' Pi`` for a symmetric ``Pi`` with the stationarity equation holding.

    A pass certifies that ``K`` minimizes the stationary control power; a
    fail says nothing.  When ``Pi`` is not unique the minimum-norm one is
    reported.
    """
    sys = problem.system
    n = sys.n
    coords = SymCoords(n)
    basis = coords.mat(np.eye(coords.dim))
    M = (sys.B.T @ basis).reshape(coords.dim, -1).T
    K = controller.K
    theta = np.linalg.lstsq(M, K.reshape(-1), rcond=None)[0]
    Pi = coords.mat(theta)
    factor_res = float(np.linalg.norm(sys.B.T @ Pi - K))
    A_cl = sys.A - sys.input_weight @ Pi
    stable, abscissa = is_hurwitz(A_cl)
    S_hat = controller.Sigma_achieved - controller.filter.P
    lyap_res = float(np.linalg.norm(A_cl @ S_hat + S_hat @ A_cl.T + controller.filter.innovation_forcing(sys)))
    passed = (factor_res <= tol * (1.0 + np.linalg.norm(K)) and stable
              and lyap_res <= tol * (1.0 + np.linalg.norm(S_hat)))
    return Proposition1Report(Pi, factor_res, bool(stable), abscissa, lyap_res, bool(passed))
