"""Problem configuration files.

A config is TOML (or JSON, by ``.json`` suffix) with these sections::

    [system]          A, B, B1, C, D as row-major nested arrays (required)
    [finite]          T, Sigma0, SigmaT, grid_steps, solver
    [stationary]      Sigma, epsilon, weight
    [simulation]      particles, dt, seed, record_stride, trajectories, t_total, kind

At least one of ``finite`` and ``stationary`` must be present.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import CovsteerError
from ..model import FiniteHorizonProblem, GaussianSpec, LinearGaussianSystem, StationaryProblem

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SOLVERS = ("shooting", "convex")
WEIGHTS = ("sigma_hat", "sigma")
SIM_KINDS = ("finite", "stationary", "chained")


class ConfigError(CovsteerError, ValueError):
    pass


@dataclass(frozen=True)
class FiniteSection:
    T: float
    Sigma0: np.ndarray
    SigmaT: np.ndarray
    grid_steps: int = 1000
    solver: str = "shooting"


@dataclass(frozen=True)
class StationarySection:
    Sigma: np.ndarray
    epsilon: float = 1e-2
    weight: str = "sigma_hat"


@dataclass(frozen=True)
class SimulationSection:
    particles: int = 20000
    dt: float = 1e-3
    seed: int = 0
    record_stride: int = 10
    trajectories: int = 0
    t_total: float | None = None
    kind: str | None = None


@dataclass(frozen=True)
class RunConfig:
    system: LinearGaussianSystem
    finite: FiniteSection | None = None
    stationary: StationarySection | None = None
    simulation: SimulationSection = field(default_factory=SimulationSection)

    def finite_problem(self) -> FiniteHorizonProblem:
        if self.finite is None:
            raise ConfigError("config has no [finite] section")
        f = self.finite
        return FiniteHorizonProblem(self.system, GaussianSpec(f.Sigma0), GaussianSpec(f.SigmaT), f.T)

    def stationary_problem(self) -> StationaryProblem:
        if self.stationary is None:
            raise ConfigError("config has no [stationary] section")
        return StationaryProblem(self.system, GaussianSpec(self.stationary.Sigma))

    def simulation_kind(self) -> str:
        kind = self.simulation.kind
        if kind is None:
            if self.finite is not None and self.stationary is not None:
                return "chained"
            return "finite" if self.finite is not None else "stationary"
        return kind

    def with_overrides(self, **kw) -> "RunConfig":
        """Replace fields by dotted name, e.g. ``{"simulation.seed": 3}``; ``None`` values are ignored."""
        cfg = self
        for key, value in kw.items():
            if value is None:
                continue
            section, name = key.split(".")
            sec = getattr(cfg, section)
            if sec is None:
                continue
            cfg = replace(cfg, **{section: replace(sec, **{name: value})})
        return cfg


def _get(d: dict, key: str, where: str, required: bool = True, default=None):
    if key not in d:
        if required:
            raise ConfigError(f"missing required key '{where}.{key}'")
        return default
    return d[key]


def _matrix(d: dict, key: str, where: str) -> np.ndarray:
    value = _get(d, key, where)
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"'{where}.{key}' is not a numeric matrix") from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"'{where}.{key}' must be a row-major nested array")
    return arr


def _number(d, key, where, kind, default, check=None, required=False):
    value = _get(d, key, where, required, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{where}.{key}' must be a number")
    if kind is int and float(value) != int(value):
        raise ConfigError(f"'{where}.{key}' must be an integer")
    value = kind(value)
    if check is not None and not check(value):
        raise ConfigError(f"'{where}.{key}' has invalid value {value}")
    return value


def _choice(d, key, where, options, default):
    value = _get(d, key, where, False, default)
    if value is not None and value not in options:
        raise ConfigError(f"'{where}.{key}' must be one of {', '.join(options)}")
    return value


def _section(raw: dict, name: str, required: bool = False) -> dict | None:
    sec = raw.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing required section '{name}'")
        return None
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be a table")
    return sec


def parse_config(raw: dict) -> RunConfig:
    """Build a :class:`RunConfig` from an already decoded mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table at top level")
    s = _section(raw, "system", required=True)
    try:
        system = LinearGaussianSystem(*(_matrix(s, k, "system") for k in ("A", "B", "B1", "C", "D")))
    except CovsteerError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid system: {exc}") from None

    finite = stationary = None
    if (f := _section(raw, "finite")) is not None:
        finite = FiniteSection(
            T=_number(f, "T", "finite", float, None, lambda v: v > 0, required=True),
            Sigma0=_matrix(f, "Sigma0", "finite"),
            SigmaT=_matrix(f, "SigmaT", "finite"),
            grid_steps=_number(f, "grid_steps", "finite", int, 1000, lambda v: v >= 1),
            solver=_choice(f, "solver", "finite", SOLVERS, "shooting"),
        )
    if (st := _section(raw, "stationary")) is not None:
        stationary = StationarySection(
            Sigma=_matrix(st, "Sigma", "stationary"),
            epsilon=_number(st, "epsilon", "stationary", float, 1e-2, lambda v: v > 0),
            weight=_choice(st, "weight", "stationary", WEIGHTS, "sigma_hat"),
        )
    if finite is None and stationary is None:
        raise ConfigError("config needs a [finite] or [stationary] section")

    sim = SimulationSection()
    if (m := _section(raw, "simulation")) is not None:
        sim = SimulationSection(
            particles=_number(m, "particles", "simulation", int, 20000, lambda v: v >= 1),
            dt=_number(m, "dt", "simulation", float, 1e-3, lambda v: v > 0),
            seed=_number(m, "seed", "simulation", int, 0, lambda v: 0 <= v < 2**64),
            record_stride=_number(m, "record_stride", "simulation", int, 10, lambda v: v >= 1),
            trajectories=_number(m, "trajectories", "simulation", int, 0, lambda v: v >= 0),
            t_total=_number(m, "t_total", "simulation", float, None, lambda v: v > 0),
            kind=_choice(m, "kind", "simulation", SIM_KINDS, None),
        )
    cfg = RunConfig(system, finite, stationary, sim)
    kind = cfg.simulation_kind()
    if kind in ("finite", "chained") and finite is None:
        raise ConfigError(f"simulation kind '{kind}' needs a [finite] section")
    if kind in ("stationary", "chained") and stationary is None:
        raise ConfigError(f"simulation kind '{kind}' needs a [stationary] section")
    return cfg


def decode(data: bytes, suffix: str = ".toml") -> dict:
    try:
        if suffix.lower() == ".json":
            return json.loads(data.decode("utf-8"))
        return tomllib.loads(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None


def load_config(path) -> tuple[RunConfig, bytes]:
    """Read and validate a config file; also return its raw bytes for hashing."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(decode(data, path.suffix)), data
