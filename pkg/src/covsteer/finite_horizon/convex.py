"""Convex relaxation of minimum-energy steering.

With ``U = -Sigma_hat K'`` the filter-state covariance obeys the linear ODE

    Sigma_hat' = A Sigma_hat + Sigma_hat A' + L DD' L' + B U' + U B'

and the energy ``int trace(U' Sigma_hat^{-1} U) dt`` is jointly convex.  On
the grid we minimize ``sum_k w_k trace(Y_k)`` subject to trapezoidal
collocation of the ODE, ``Sigma_hat_0 = 0``, ``Sigma_hat_N = Sigma_T - P(T)``
and ``[[Y_k, U_k'], [U_k, Sigma_hat_k]] >= 0``.

Two stages:

1. ADMM on the conic form.  The affine projection reuses one sparse
   factorization; the cone projection is a batched eigendecomposition;
   the penalty is adapted by residual balancing.
2. Polish.  With ``Y`` eliminated the problem is smooth on ``Sigma_hat_k > 0``
   and its Hessian is block diagonal, so an infeasible-start Newton method
   with sparse KKT solves finishes from a good ADMM point in a few steps.
   Polishing is attempted after 250, 500, 1000, ... ADMM iterations and the
   first attempt that converges is kept.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from ..errors import ConvergenceError, InfeasibleError, PreconditionError
from ..kalman import build_filter_schedule
from ..model import FiniteHorizonProblem, require_valid
from ..numerics import CovariancePath, SymCoords, TimeGrid
from .feasibility import check_feasibility
from .schedule import GainSchedule, trapezoid_cost

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvexOptions:
    max_iter: int = 16000
    rho: float = 10.0
    relaxation: float = 1.6
    adaptive_rho: bool = True
    eps_abs: float = 1e-9
    eps_rel: float = 1e-7
    check_every: int = 50
    polish: bool = True
    polish_iter: int = 30
    first_polish: int = 250
    tol_dynamics: float = 1e-6
    tol_boundary: float = 1e-5


@dataclass(frozen=True)
class ConvexReport:
    admm_iterations: int
    polish_iterations: int
    objective: float
    dynamics_residual: float
    boundary_mismatch: float
    admm_primal_residual: float
    admm_dual_residual: float
    certified: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _psd_project(Z: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(Z)
    return (V * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)


class _Collocation:
    """Trapezoidal collocation of the filter-state covariance ODE on a grid."""

    def __init__(self, problem: FiniteHorizonProblem, grid: TimeGrid):
        sys = problem.system
        self.sys, self.grid = sys, grid
        self.n, self.m, self.N, self.h = sys.n, sys.m, grid.steps, grid.h
        self.small = SymCoords(sys.n)
        self.filter = build_filter_schedule(sys, problem.initial.covariance, grid)
        self.Q = self.filter.innovation_forcing(sys)
        self.target = problem.target.covariance - self.filter.P_T

    def drift(self, U, S):
        """``A S + S A' + B U' + U B'`` (no forcing)."""
        F = self.sys.B @ np.swapaxes(U, -1, -2) + self.sys.A @ S
        return F + np.swapaxes(F, -1, -2)

    def constraint_matrix(self, unpack, dim: int, fix_initial_block: bool):
        """Sparse rows for the initial condition, N collocation steps and the terminal condition.

        ``unpack`` maps per-node coordinate vectors to ``(U, S)``.
        """
        U_b, S_b = unpack(np.eye(dim))
        E_S = self.small.vec(S_b).T
        E_G = self.small.vec(self.drift(U_b, S_b)).T
        s, N, h = self.small.dim, self.N, self.h
        fwd = sparse.csr_matrix(E_S - 0.5 * h * E_G)
        bwd = sparse.csr_matrix(-E_S - 0.5 * h * E_G)
        first = sparse.eye(dim) if fix_initial_block else sparse.csr_matrix(E_S)
        rows = [
            sparse.hstack([first, sparse.csr_matrix((first.shape[0], N * dim))]),
            sparse.kron(sparse.eye(N, N + 1), bwd) + sparse.kron(sparse.eye(N, N + 1, k=1), fwd),
            sparse.hstack([sparse.csr_matrix((s, N * dim)), sparse.csr_matrix(E_S)]),
        ]
        Qv = self.small.vec(self.Q)
        b = np.concatenate([
            np.zeros(first.shape[0]),
            (0.5 * h * (Qv[:-1] + Qv[1:])).reshape(-1),
            self.small.vec(self.target),
        ])
        return sparse.vstack(rows).tocsc(), b

    def march(self, U):
        """Solve the collocation recurrence for ``S`` given ``U``, with ``S_0 = 0``."""
        n, h = self.n, self.h
        I = np.eye(n)
        lyap = np.kron(I, self.sys.A) + np.kron(self.sys.A, I)
        inv = np.linalg.inv(np.eye(n * n) - 0.5 * h * lyap)
        step = inv @ (np.eye(n * n) + 0.5 * h * lyap)
        BU = self.sys.B @ np.swapaxes(U, -1, -2)
        # symmetric, so row- and column-major vec coincide
        F = (BU + np.swapaxes(BU, -1, -2) + self.Q).reshape(len(U), -1)
        S = np.zeros((len(U), n, n))
        for k in range(len(U) - 1):
            Sk = (step @ S[k].reshape(-1) + 0.5 * h * inv @ (F[k] + F[k + 1])).reshape(n, n)
            S[k + 1] = 0.5 * (Sk + Sk.T)
        return S

    def defect(self, U, S):
        F = self.drift(U, S) + self.Q
        return S[1:] - S[:-1] - 0.5 * self.h * (F[1:] + F[:-1])


class _ADMM:
    """ADMM on the conic form, resumable so polish attempts can interleave."""

    def __init__(self, col: _Collocation, opts: ConvexOptions):
        n, m, N = col.n, col.m, col.N
        self.col, self.opts, self.m, self.N = col, opts, m, N
        self.big = big = SymCoords(n + m)
        self.d = d = big.dim
        self.M, self.b = col.constraint_matrix(self.unpack, d, fix_initial_block=False)
        self.solve_MMt = splinalg.factorized((self.M @ self.M.T).tocsc())
        trace_Y = np.trace(big.mat(np.eye(d))[:, :m, :m], axis1=1, axis2=2)
        self.c = np.outer(col.grid.trapezoid_weights() / col.h, trace_Y).reshape(-1)
        self.rho = opts.rho
        self.z = np.zeros(self.M.shape[1])
        self.u = np.zeros_like(self.z)
        self.r_p = self.r_d = np.inf
        self.iterations = 0
        self.converged = False

    def unpack(self, v):
        Z = self.big.mat(v)
        return Z[..., self.m:, : self.m], Z[..., self.m:, self.m:]

    @property
    def U(self) -> np.ndarray:
        return self.unpack(self.z.reshape(self.N + 1, self.d))[0]

    def run(self, iterations: int):
        opts, M, b, big = self.opts, self.M, self.b, self.big
        alpha = opts.relaxation
        z, u = self.z, self.u
        for _ in range(iterations):
            self.iterations += 1
            v = z - u - self.c / self.rho
            x = v - M.T @ self.solve_MMt(M @ v - b)
            xr = alpha * x + (1.0 - alpha) * z
            z_new = big.vec(_psd_project(big.mat((xr + u).reshape(self.N + 1, self.d)))).reshape(-1)
            u += xr - z_new
            self.r_p = float(np.linalg.norm(x - z_new))
            self.r_d = float(self.rho * np.linalg.norm(z_new - z))
            z = z_new
            if self.iterations % opts.check_every == 0:
                eps_p = opts.eps_abs * np.sqrt(z.size) + opts.eps_rel * max(np.linalg.norm(x), np.linalg.norm(z))
                eps_d = opts.eps_abs * np.sqrt(z.size) + opts.eps_rel * self.rho * np.linalg.norm(u)
                log.debug("admm %d: rp %.2e rd %.2e rho %.2e", self.iterations, self.r_p, self.r_d, self.rho)
                if self.r_p <= eps_p and self.r_d <= eps_d:
                    self.converged = True
                    break
            if opts.adaptive_rho:
                if self.r_p > 10.0 * self.r_d:
                    self.rho *= 2.0
                    u /= 2.0
                elif self.r_d > 10.0 * self.r_p:
                    self.rho /= 2.0
                    u *= 2.0
        self.z, self.u = z, u


def _polish(col: _Collocation, U_start, max_iter: int, tol: float = 1e-10):
    """Infeasible-start Newton on ``sum_k w_k tr(U_k' S_k^{-1} U_k)``.

    Node 0 is pinned to ``U_0 = 0, S_0 = 0``; its objective weight is dropped
    since the Schur block forces ``U_0 = 0`` anyway.
    """
    n, m, N = col.n, col.m, col.N
    nm = n * m
    q = nm + col.small.dim

    def unpack(y):
        U = y[..., :nm].reshape(y.shape[:-1] + (n, m))
        return U, col.small.mat(y[..., nm:])

    def pack(U, S):
        return np.concatenate([U.reshape(U.shape[:-2] + (nm,)), col.small.vec(S)], axis=-1)

    M, b = col.constraint_matrix(unpack, q, fix_initial_block=True)
    w = col.grid.trapezoid_weights()[1:]
    dU_b, dS_b = unpack(np.eye(q))

    def interior(y):
        return unpack(y.reshape(N + 1, q)[1:])

    def domain_ok(y):
        _, S = interior(y)
        return bool(np.all(np.linalg.eigvalsh(S)[:, 0] > 0.0))

    def grad_hess(y, hess=True):
        U, S = interior(y)
        Sinv = np.linalg.inv(S)
        V = Sinv @ U
        g = np.zeros((N + 1, q))
        g[1:] = w[:, None] * pack(2.0 * V, -V @ np.swapaxes(V, -1, -2))
        if not hess:
            return g.reshape(-1), None
        # d(S^-1 U) along each coordinate direction; Hessian form is 2 w tr(dV' S dV)
        dV = Sinv[:, None] @ (dU_b[None] - dS_b[None] @ V[:, None])
        H = 2.0 * w[:, None, None] * np.einsum("kiab,kjab->kij", dV, S[:, None] @ dV)
        return g.reshape(-1), H

    def resid(y, nu):
        g, _ = grad_hess(y, hess=False)
        return np.concatenate([g + M.T @ nu, M @ y - b])

    # shrink toward the zero-gain path until the start is strictly inside the cone
    for lam in 0.5 ** np.arange(30):
        U0 = lam * U_start
        y = pack(U0, col.march(U0)).reshape(-1)
        y.reshape(N + 1, q)[0] = 0.0
        if domain_ok(y):
            break
    else:
        raise ConvergenceError("no strictly interior polish start", np.inf)
    nu = np.zeros(M.shape[0])
    r = resid(y, nu)
    zero_block = sparse.csr_matrix((q, q))
    it = 0
    for it in range(1, max_iter + 1):
        _, H = grad_hess(y)
        Hs = sparse.block_diag([zero_block] + list(H), format="csc")
        KKT = sparse.bmat([[Hs, M.T], [M, None]], format="csc")
        delta = splinalg.spsolve(KKT, -r)
        dy, dnu = delta[: y.size], delta[y.size:]
        t = 1.0
        while not domain_ok(y + t * dy):
            t *= 0.5
            if t < 1e-14:
                raise ConvergenceError("polish step left the cone", float(np.linalg.norm(r)))
        rn = np.linalg.norm(r)
        while True:
            r_new = resid(y + t * dy, nu + t * dnu)
            if np.linalg.norm(r_new) <= (1.0 - 0.01 * t) * rn or t < 1e-10:
                break
            t *= 0.5
        y, nu, r = y + t * dy, nu + t * dnu, r_new
        log.debug("polish %d: |r| %.3e step %.3g", it, np.linalg.norm(r), t)
        if np.linalg.norm(r[y.size:]) <= 1e-12 and np.linalg.norm(r[: y.size]) <= tol:
            U, _ = unpack(y.reshape(N + 1, q))
            return U, it
    raise ConvergenceError("polish did not converge", float(np.linalg.norm(r)))


def solve_convex_fallback(problem: FiniteHorizonProblem, grid: TimeGrid | None = None,
                          options: ConvexOptions | None = None, *, check: bool = True,
                          raise_on_failure: bool = True) -> tuple[GainSchedule, ConvexReport]:
    """Steering gain from the discretized convex program.

    The returned ``sigma_hat`` is re-marched from the solver's ``U`` with the
    collocation rule, so ``dynamics_residual`` is at rounding level and
    ``boundary_mismatch`` measures how well the terminal condition is met.
    ``K`` is recovered as ``-U' Sigma_hat^{-1}`` at interior nodes; the
    singular initial node copies the first interior gain.

    Raises
    ------
    InfeasibleError
        If ``check`` and the target does not dominate ``P(T)``.
    ConvergenceError
        Tolerances not met and ``raise_on_failure``; ``.best`` holds
        ``(schedule, report)`` with the schedule marked uncertified.
    """
    opts = options or ConvexOptions()
    sys = problem.system
    require_valid(sys)
    if grid is None:
        grid = TimeGrid.horizon(problem.T, 1000)
    if grid.t0 != 0.0 or abs(grid.t1 - problem.T) > 1e-12 * problem.T:
        raise PreconditionError("grid must span [0, T]")
    if check:
        cert = check_feasibility(problem, grid)
        if not cert.feasible:
            raise InfeasibleError(f"target is not reachable (gap {cert.gap:.3e})", cert)

    col = _Collocation(problem, grid)
    admm = _ADMM(col, opts)
    U, n_polish = None, 0
    chunk = opts.first_polish
    while U is None and admm.iterations < opts.max_iter and not admm.converged:
        admm.run(min(chunk, opts.max_iter - admm.iterations))
        chunk = admm.iterations
        if not opts.polish:
            continue
        try:
            U, n_polish = _polish(col, admm.U, opts.polish_iter)
        except ConvergenceError as exc:
            log.debug("polish after %d ADMM iterations failed: %s", admm.iterations, exc)
    if U is None:
        U = admm.U
    U = U.copy()
    U[0] = 0.0
    S = col.march(U)
    dyn = float(np.linalg.norm(col.defect(U, S), axis=(1, 2)).max())
    boundary = float(np.linalg.norm(S[-1] - col.target))
    N = grid.steps
    K = np.empty((N + 1, sys.m, sys.n))
    interior_pd = bool(np.all(np.linalg.eigvalsh(S[1:])[:, 0] > 0.0))
    if interior_pd:
        K[1:] = -np.swapaxes(np.linalg.solve(S[1:], U[1:]), -1, -2)
    else:
        K[1:] = -np.swapaxes(np.linalg.pinv(S[1:]) @ U[1:], -1, -2)
    K[0] = K[1]
    cost = trapezoid_cost(grid, K, S)
    certified = bool(dyn <= opts.tol_dynamics and boundary <= opts.tol_boundary and interior_pd)
    report = ConvexReport(admm.iterations, n_polish, cost, dyn, boundary, admm.r_p, admm.r_d, certified)
    schedule = GainSchedule(grid, K, col.filter, CovariancePath(grid, S), cost,
                            "convex" if certified else "convex (suboptimal, uncertified)")
    if not certified and raise_on_failure:
        raise ConvergenceError("convex fallback did not meet its tolerances", boundary, best=(schedule, report))
    return schedule, report
