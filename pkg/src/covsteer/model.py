"""Plant and problem data for output-feedback covariance steering.

The plant is the LTI system

    dx = A x dt + B u dt + B1 dw
    dy = C x dt + D dv

with independent standard Wiener processes ``w`` and ``v``.  Construction
only checks shapes; the structural assumptions (controllable ``(A, B)``,
observable ``(A, C)``, invertible ``D``) are checked by :func:`validate_system`
and enforced by the synthesis routines through :func:`require_valid`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import AssumptionError, DimensionError, PreconditionError

SYMMETRY_REPAIR_TOL = 1e-9


def as_matrix(value, name: str) -> np.ndarray:
    """Coerce nested sequences to a read-only 2-D float array."""
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DimensionError(name, f"not a numeric matrix ({exc})") from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(name, f"expected a 2-D matrix, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(name, "contains non-finite entries")
    arr.setflags(write=False)
    return arr


def symmetrize(M: np.ndarray, name: str = "matrix", tol: float = SYMMETRY_REPAIR_TOL) -> np.ndarray:
    """Return ``(M + M')/2``, rejecting matrices that are far from symmetric."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(name, f"expected a square matrix, got shape {M.shape}")
    scale = max(np.linalg.norm(M), np.finfo(float).tiny)
    asym = np.linalg.norm(M - M.T) / scale
    if asym >= tol:
        raise PreconditionError(f"{name} is not symmetric (relative asymmetry {asym:.2e})")
    return 0.5 * (M + M.T)


def _rank(M: np.ndarray, n: int) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > n * np.finfo(float).eps * s[0]))


def controllability_matrix(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def controllability_rank(A, B) -> int:
    """Rank of ``[B, AB, ..., A^{n-1}B]`` with threshold ``n*eps*sigma_max``."""
    A = np.asarray(A, dtype=float)
    return _rank(controllability_matrix(A, B), A.shape[0])


def observability_rank(A, C) -> int:
    """Rank of ``[C; CA; ...; CA^{n-1}]`` (dual of :func:`controllability_rank`)."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    return _rank(controllability_matrix(A.T, C.T), A.shape[0])


@dataclass(frozen=True)
class LinearGaussianSystem:
    """The matrix tuple ``(A, B, B1, C, D)`` of the plant."""

    A: np.ndarray
    B: np.ndarray
    B1: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "B1", "C", "D"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError("A", f"must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionError("B", f"must have {n} rows, got {self.B.shape}")
        if self.B1.shape[0] != n:
            raise DimensionError("B1", f"must have {n} rows, got {self.B1.shape}")
        if self.C.shape[1] != n:
            raise DimensionError("C", f"must have {n} columns, got {self.C.shape}")
        p = self.C.shape[0]
        if self.D.shape != (p, p):
            raise DimensionError("D", f"must be {p}x{p} to match C, got {self.D.shape}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def m1(self) -> int:
        return self.B1.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @cached_property
    def process_noise(self) -> np.ndarray:
        """``B1 B1'``."""
        return self.B1 @ self.B1.T

    @cached_property
    def measurement_cov(self) -> np.ndarray:
        """``D D'``."""
        return self.D @ self.D.T

    @cached_property
    def _dd_cho(self):
        return linalg.cho_factor(self.measurement_cov)

    @cached_property
    def output_weight(self) -> np.ndarray:
        """``C' (DD')^{-1} C``, the information rate of the measurements."""
        return self.C.T @ linalg.cho_solve(self._dd_cho, self.C)

    @cached_property
    def gain_map(self) -> np.ndarray:
        """``C' (DD')^{-1}``; the Kalman gain is ``P @ gain_map``."""
        return linalg.cho_solve(self._dd_cho, self.C).T

    @cached_property
    def input_weight(self) -> np.ndarray:
        """``B B'``."""
        return self.B @ self.B.T

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("A", "B", "B1", "C", "D")}


@dataclass(frozen=True)
class GaussianSpec:
    """Zero-mean Gaussian law given by its covariance.

    Slightly asymmetric input is symmetrized; a nonzero ``mean`` is rejected
    since only centered distributions are supported.
    """

    covariance: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        cov = symmetrize(as_matrix(self.covariance, "covariance"), "covariance")
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0.0:
            raise PreconditionError(
                f"covariance must be positive definite (smallest eigenvalue {eig[0]:.3e})"
            )
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        n = cov.shape[0]
        if self.mean is not None:
            mean = np.asarray(self.mean, dtype=float).reshape(-1)
            if mean.shape != (n,):
                raise DimensionError("mean", f"expected length {n}")
            if np.any(mean != 0.0):
                raise PreconditionError("only zero-mean distributions are supported")
        zero = np.zeros(n)
        zero.setflags(write=False)
        object.__setattr__(self, "mean", zero)

    @property
    def n(self) -> int:
        return self.covariance.shape[0]


@dataclass(frozen=True)
class FiniteHorizonProblem:
    system: LinearGaussianSystem
    initial: GaussianSpec
    target: GaussianSpec
    T: float

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise PreconditionError(f"horizon T must be positive, got {self.T}")
        for name in ("initial", "target"):
            spec = getattr(self, name)
            if spec.n != self.system.n:
                raise DimensionError(name, f"covariance must be {self.system.n}x{self.system.n}")


@dataclass(frozen=True)
class StationaryProblem:
    system: LinearGaussianSystem
    target: GaussianSpec

    def __post_init__(self):
        if self.target.n != self.system.n:
            raise DimensionError("target", f"covariance must be {self.system.n}x{self.system.n}")


@dataclass(frozen=True)
class Finding:
    name: str
    passed: bool
    value: float
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    controllability_rank: int
    observability_rank: int
    d_min_singular_value: float
    findings: tuple[Finding, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.findings)

    def failures(self) -> list[Finding]:
        return [f for f in self.findings if not f.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "controllability_rank": self.controllability_rank,
            "observability_rank": self.observability_rank,
            "d_min_singular_value": self.d_min_singular_value,
            "findings": [f.__dict__ for f in self.findings],
        }


def validate_system(system: LinearGaussianSystem) -> ValidationReport:
    """Check controllability, observability and invertibility of ``D``."""
    n = system.n
    rc = controllability_rank(system.A, system.B)
    ro = observability_rank(system.A, system.C)
    s = np.linalg.svd(system.D, compute_uv=False)
    d_tol = system.p * np.finfo(float).eps * max(s[0], 1.0)
    findings = (
        Finding("controllable", rc == n, float(rc), f"rank [B AB ...] = {rc} of {n}"),
        Finding("observable", ro == n, float(ro), f"rank [C; CA; ...] = {ro} of {n}"),
        Finding(
            "D invertible",
            bool(s[-1] > d_tol),
            float(s[-1]),
            f"smallest singular value {s[-1]:.3e} (threshold {d_tol:.1e})",
        ),
    )
    return ValidationReport(rc, ro, float(s[-1]), findings)


def require_valid(system: LinearGaussianSystem) -> ValidationReport:
    report = validate_system(system)
    if not report.passed:
        msg = "; ".join(f"{f.name} failed: {f.detail}" for f in report.failures())
        raise AssumptionError(msg)
    return report
