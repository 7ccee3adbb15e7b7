"""Monte Carlo simulation of the closed loop (plant, Kalman filter, gain).

Euler-Maruyama on

    dx    = A x dt + B u dt + B1 dw
    dxhat = A xhat dt + B u dt + L (dy - C xhat dt),   dy = C x dt + D dv
    u     = -K xhat

Particles are split into fixed-size blocks.  Each block draws from its own
Philox stream keyed by ``(seed, block index)`` and accumulates first and
second moment sums at the recorded steps; block sums are reduced in block
order, so results do not depend on how many workers run the blocks.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, SimulationError
from .finite_horizon.schedule import GainSchedule
from .model import FiniteHorizonProblem, LinearGaussianSystem, StationaryProblem
from .stationary import StationaryController

log = logging.getLogger(__name__)

DIVERGENCE_FRACTION = 1e-3
_BLOWUP = 1e100


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``trajectories`` is how many particles (ids ``0..trajectories-1``) keep
    their full recorded path for export.  ``noise=False`` switches off both
    Wiener increments and exists for testing.
    """

    n_particles: int = 20000
    dt: float = 1e-3
    seed: int = 0
    record_stride: int = 10
    trajectories: int = 0
    block_size: int = 2048
    workers: int | None = None
    noise: bool = True

    def __post_init__(self):
        if int(self.n_particles) < 1:
            raise PreconditionError("n_particles must be at least 1")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise PreconditionError(f"dt must be positive, got {self.dt}")
        if int(self.record_stride) < 1:
            raise PreconditionError("record_stride must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError("seed must be an unsigned 64-bit integer")
        if int(self.block_size) < 1:
            raise PreconditionError("block_size must be at least 1")
        if not 0 <= int(self.trajectories) <= int(self.n_particles):
            raise PreconditionError("trajectories must lie in [0, n_particles]")


@dataclass(frozen=True)
class EnsembleStats:
    """Sample statistics at the recorded times.

    Covariances use the ``N - 1`` denominator (``1`` when ``N = 1``).  The
    cross term is the raw second moment ``E[xhat xtilde']``.
    """

    times: np.ndarray
    mean_x: np.ndarray
    mean_xhat: np.ndarray
    cov_x: np.ndarray
    cov_xhat: np.ndarray
    cov_xtilde: np.ndarray
    cross_xhat_xtilde: np.ndarray
    counts: np.ndarray
    n_particles: int
    seed: int
    n_diverged: int = 0
    trajectories: np.ndarray | None = field(default=None, repr=False)

    def index_at(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} was not recorded")
        return k

    def relative_error(self, target, t: float | None = None) -> float:
        """``||cov_x(t) - target||_F / ||target||_F`` (final time by default)."""
        target = np.asarray(target, dtype=float)
        k = -1 if t is None else self.index_at(t)
        return float(np.linalg.norm(self.cov_x[k] - target) / np.linalg.norm(target))

    def to_dict(self) -> dict:
        nodes = []
        for k, t in enumerate(self.times):
            nodes.append({
                "t": t,
                "count": int(self.counts[k]),
                "mean_x": self.mean_x[k],
                "mean_xhat": self.mean_xhat[k],
                "cov_x": self.cov_x[k],
                "cov_xhat": self.cov_xhat[k],
                "cov_xtilde": self.cov_xtilde[k],
                "cross_xhat_xtilde": self.cross_xhat_xtilde[k],
            })
        return {"n_particles": self.n_particles, "seed": self.seed, "n_diverged": self.n_diverged, "nodes": nodes}

    def trajectory_rows(self):
        """Rows ``(t, particle_id, x..., xhat..., u...)`` of the recorded trajectories."""
        if self.trajectories is None:
            return
        for k, t in enumerate(self.times):
            for i, row in enumerate(self.trajectories[k]):
                yield (t, i, *row)


@dataclass(frozen=True)
class _Plan:
    """Per-step gains for one simulation run."""

    system: LinearGaussianSystem
    dt: float
    K: np.ndarray  # (steps, m, n)
    L: np.ndarray  # (steps, n, p)
    record: np.ndarray  # step indices to record, increasing, includes 0 and steps

    @property
    def steps(self) -> int:
        return self.K.shape[0]


def _step_count(span: float, dt: float, what: str) -> int:
    r = span / dt
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
        raise PreconditionError(f"dt={dt} must divide {what} ({span})")
    return k


def _schedule_steps(schedule: GainSchedule, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Gains at ``t = k dt`` by linear interpolation on the finest stored grid."""
    grid = schedule.grid
    _step_count(grid.h, dt, "the schedule grid step")
    n_steps = _step_count(grid.t1 - grid.t0, dt, "the horizon")
    if schedule.K_half is not None and schedule.L_half is not None:
        fine, K, L = grid.refined(2), schedule.K_half, schedule.L_half
    else:
        fine, K, L = grid, schedule.K_path, schedule.filter.L_path
    s = np.arange(n_steps) * dt / fine.h
    i = np.minimum(np.floor(s + 1e-9).astype(int), fine.steps - 1)
    w = np.clip(s - i, 0.0, 1.0)[:, None, None]
    return (1 - w) * K[i] + w * K[i + 1], (1 - w) * L[i] + w * L[i + 1]


def _record_steps(n_steps: int, stride: int, extra=()) -> np.ndarray:
    r = set(range(0, n_steps + 1, stride)) | {n_steps} | {int(e) for e in extra}
    return np.array(sorted(r))


def _factor(S: np.ndarray) -> np.ndarray:
    """``F`` with ``F F' = S`` for PSD ``S``."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(0.5 * (S + S.T))
        return V * np.sqrt(np.clip(lam, 0.0, None))


class _Initial:
    """Draws ``(x, xhat)`` for a block: ``xhat ~ N(0, S_hat)``, ``x - xhat ~ N(0, S_err)``."""

    def __init__(self, S_hat: np.ndarray | None, S_err: np.ndarray, x0=None):
        self.F_hat = None if S_hat is None else _factor(S_hat)
        self.F_err = _factor(S_err)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float).reshape(-1)

    def draw(self, rng: np.random.Generator, b: int, n: int):
        if self.x0 is not None:
            return np.tile(self.x0, (b, 1)), np.zeros((b, n))
        xhat = np.zeros((b, n)) if self.F_hat is None else rng.standard_normal((b, n)) @ self.F_hat.T
        x = xhat + rng.standard_normal((b, n)) @ self.F_err.T
        return x, xhat


def _block_stream(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(block,))))


def _run_block(plan: _Plan, init: _Initial, cfg: SimConfig, block: int, start: int, b: int):
    sys = plan.system
    n, m, p, m1 = sys.n, sys.m, sys.p, sys.m1
    A, B, B1, C, D = sys.A, sys.B, sys.B1, sys.C, sys.D
    dt, sq = plan.dt, np.sqrt(plan.dt)
    rng = _block_stream(cfg.seed, block)
    x, xhat = init.draw(rng, b, n)
    n_rec = plan.record.size
    sums = {
        "count": np.zeros(n_rec),
        "x": np.zeros((n_rec, n)),
        "xhat": np.zeros((n_rec, n)),
        "xx": np.zeros((n_rec, n, n)),
        "hh": np.zeros((n_rec, n, n)),
        "ee": np.zeros((n_rec, n, n)),
        "he": np.zeros((n_rec, n, n)),
        "e": np.zeros((n_rec, n)),
    }
    n_traj = max(0, min(cfg.trajectories - start, b))
    traj = np.zeros((n_rec, n_traj, 2 * n + m)) if n_traj else None
    alive = np.ones(b, dtype=bool)
    rec = 0

    def record(k: int, u: np.ndarray):
        nonlocal rec
        xa, ha = x[alive], xhat[alive]
        ea = xa - ha
        sums["count"][rec] = xa.shape[0]
        sums["x"][rec] = xa.sum(0)
        sums["xhat"][rec] = ha.sum(0)
        sums["e"][rec] = ea.sum(0)
        sums["xx"][rec] = xa.T @ xa
        sums["hh"][rec] = ha.T @ ha
        sums["ee"][rec] = ea.T @ ea
        sums["he"][rec] = ha.T @ ea
        if traj is not None:
            traj[rec] = np.hstack([x[:n_traj], xhat[:n_traj], u[:n_traj]])
        rec += 1

    for k in range(plan.steps):
        K, L = plan.K[k], plan.L[k]
        u = -xhat @ K.T
        if rec < n_rec and plan.record[rec] == k:
            record(k, u)
        if cfg.noise:
            z = rng.standard_normal((b, m1 + p)) * sq
            dw, dv = z[:, :m1], z[:, m1:]
        else:
            dw, dv = np.zeros((b, m1)), np.zeros((b, p))
        drive = u @ B.T
        innov = (x - xhat) @ C.T * dt + dv @ D.T
        x = x + (x @ A.T + drive) * dt + dw @ B1.T
        xhat = xhat + (xhat @ A.T + drive) * dt + innov @ L.T
        if (k + 1) % 50 == 0 or k + 1 == plan.steps:
            bad = ~(np.all(np.isfinite(x), 1) & np.all(np.isfinite(xhat), 1)
                    & (np.abs(x).max(1) < _BLOWUP) & (np.abs(xhat).max(1) < _BLOWUP))
            if np.any(bad & alive):
                alive &= ~bad
                x[bad] = 0.0
                xhat[bad] = 0.0
    u = -xhat @ plan.K[-1].T
    record(plan.steps, u)
    return sums, traj, int(b - alive.sum())


def _workers(cfg: SimConfig, n_blocks: int) -> int:
    w = cfg.workers
    env = os.environ.get("COVSTEER_THREADS")
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise PreconditionError(f"COVSTEER_THREADS must be an integer, got {env!r}") from None
        w = cap if w is None else min(w, cap)
    if w is None:
        w = os.cpu_count() or 1
    return max(1, min(int(w), n_blocks))


def _simulate(plan: _Plan, init: _Initial, cfg: SimConfig) -> EnsembleStats:
    N, bs = int(cfg.n_particles), int(cfg.block_size)
    blocks = [(j, s, min(bs, N - s)) for j, s in enumerate(range(0, N, bs))]
    workers = _workers(cfg, len(blocks))
    log.debug("simulating %d particles in %d blocks on %d workers", N, len(blocks), workers)
    if workers == 1:
        results = [_run_block(plan, init, cfg, *blk) for blk in blocks]
    else:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda blk: _run_block(plan, init, cfg, *blk), blocks))

    total = {k: np.zeros_like(v) for k, v in results[0][0].items()}
    for sums, _, _ in results:
        for k in total:
            total[k] += sums[k]
    n_div = sum(r[2] for r in results)
    if n_div > DIVERGENCE_FRACTION * N:
        raise SimulationError(f"{n_div} of {N} particles diverged")
    if n_div:
        log.warning("%d of %d particles diverged and were dropped", n_div, N)

    cnt = total["count"]
    c = np.maximum(cnt, 1.0)[:, None]
    denom = np.maximum(cnt - 1.0, 1.0)[:, None, None]

    def cov(S, mu):
        V = (S - cnt[:, None, None] * mu[:, :, None] * mu[:, None, :]) / denom
        return 0.5 * (V + np.swapaxes(V, 1, 2))

    mx, mh, me = total["x"] / c, total["xhat"] / c, total["e"] / c
    trajs = [t for _, t, _ in results if t is not None]
    traj = np.concatenate(trajs, axis=1) if trajs else None
    return EnsembleStats(
        times=plan.record * plan.dt,
        mean_x=mx,
        mean_xhat=mh,
        cov_x=cov(total["xx"], mx),
        cov_xhat=cov(total["hh"], mh),
        cov_xtilde=cov(total["ee"], me),
        cross_xhat_xtilde=total["he"] / c[:, :, None],
        counts=cnt.astype(int),
        n_particles=N,
        seed=int(cfg.seed),
        n_diverged=n_div,
        trajectories=traj,
    )


def _finite_initial(problem: FiniteHorizonProblem, x0) -> _Initial:
    return _Initial(None, problem.initial.covariance, x0)


def _stationary_initial(problem: StationaryProblem, controller: StationaryController, x0) -> _Initial:
    Sigma = problem.target.covariance
    P = controller.filter.P
    S_hat = Sigma - P
    if np.linalg.eigvalsh(S_hat)[0] < 0:
        return _Initial(None, Sigma, x0)
    return _Initial(S_hat, P, x0)


def simulate_finite(problem: FiniteHorizonProblem, schedule: GainSchedule, config: SimConfig, *,
                    x0=None) -> EnsembleStats:
    """Run the time-varying loop on ``[0, T]`` from ``x(0) ~ N(0, Sigma0)``, ``xhat(0) = 0``.

    ``x0`` fixes every particle's initial state (testing hook).
    """
    if abs(schedule.grid.t1 - problem.T) > 1e-12 * problem.T or schedule.grid.t0 != 0:
        raise PreconditionError("gain schedule must cover [0, T]")
    K, L = _schedule_steps(schedule, config.dt)
    plan = _Plan(problem.system, config.dt, K, L, _record_steps(K.shape[0], config.record_stride))
    return _simulate(plan, _finite_initial(problem, x0), config)


def simulate_stationary(problem: StationaryProblem, controller: StationaryController, config: SimConfig,
                        t_end: float, *, x0=None) -> EnsembleStats:
    """Run the constant-gain loop on ``[0, t_end]`` started at the target law.

    The initial estimate and error are drawn independently with covariances
    ``Sigma - P`` and ``P`` so that the joint state starts stationary.
    """
    if not controller.hurwitz:
        raise PreconditionError("controller does not stabilize the loop")
    steps = _step_count(t_end, config.dt, "t_end")
    K = np.broadcast_to(controller.K, (steps,) + controller.K.shape)
    L = np.broadcast_to(controller.L, (steps,) + controller.L.shape)
    plan = _Plan(problem.system, config.dt, K, L, _record_steps(steps, config.record_stride))
    return _simulate(plan, _stationary_initial(problem, controller, x0), config)


def chain_finite_then_stationary(problem: FiniteHorizonProblem, schedule: GainSchedule,
                                 controller: StationaryController, config: SimConfig, t_total: float, *,
                                 x0=None) -> EnsembleStats:
    """Steer on ``[0, T]`` with the schedule, then hold with the constant controller until ``t_total``."""
    if not controller.hurwitz:
        raise PreconditionError("controller does not stabilize the loop")
    if t_total < problem.T * (1 - 1e-12):
        raise PreconditionError("t_total must be at least T")
    K1, L1 = _schedule_steps(schedule, config.dt)
    n1 = K1.shape[0]
    extra = t_total - problem.T
    n2 = 0 if extra <= 1e-12 * problem.T else _step_count(extra, config.dt, "t_total - T")
    K = np.concatenate([K1, np.broadcast_to(controller.K, (n2,) + controller.K.shape)])
    L = np.concatenate([L1, np.broadcast_to(controller.L, (n2,) + controller.L.shape)])
    plan = _Plan(problem.system, config.dt, K, L, _record_steps(n1 + n2, config.record_stride, (n1,)))
    return _simulate(plan, _finite_initial(problem, x0), config)
