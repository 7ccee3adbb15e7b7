"""Finite-horizon covariance steering."""

from .convex import ConvexOptions, ConvexReport, solve_convex_fallback
from .feasibility import FEASIBILITY_TOL, FeasibilityCertificate, check_feasibility
from .schedule import GainSchedule, evaluate_expected_cost, joint_covariance_path
from .shooting import ShootingResult, shoot, sigma_hat_from_pi

__all__ = [
    "ConvexOptions",
    "ConvexReport",
    "FEASIBILITY_TOL",
    "FeasibilityCertificate",
    "GainSchedule",
    "ShootingResult",
    "check_feasibility",
    "evaluate_expected_cost",
    "joint_covariance_path",
    "shoot",
    "sigma_hat_from_pi",
    "solve_convex_fallback",
]
