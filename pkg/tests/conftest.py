import numpy as np
import pytest

from covsteer.finite_horizon import shoot
from covsteer.model import FiniteHorizonProblem, GaussianSpec, LinearGaussianSystem, StationaryProblem
from covsteer.numerics import TimeGrid
from covsteer.stationary import certify_stationary, synthesize_gain


def double_integrator():
    return LinearGaussianSystem(
        A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], B1=[[0.0], [1.0]], C=[[1.0, 0.0]], D=[[0.1]]
    )


def scalar_system(a=0.0):
    return LinearGaussianSystem([[a]], [[1.0]], [[1.0]], [[1.0]], [[1.0]])


@pytest.fixture(scope="session")
def di():
    return double_integrator()


@pytest.fixture(scope="session")
def di_finite(di):
    return FiniteHorizonProblem(di, GaussianSpec(np.eye(2)), GaussianSpec(0.5 * np.eye(2)), 1.0)


@pytest.fixture(scope="session")
def di_stationary(di):
    return StationaryProblem(di, GaussianSpec(0.5 * np.eye(2)))


@pytest.fixture(scope="session")
def di_shot(di_finite):
    """Shooting solution on the N=1000 grid, shared because it takes a few seconds."""
    return shoot(di_finite, TimeGrid.horizon(1.0, 1000))


@pytest.fixture(scope="session")
def di_controller(di_stationary):
    return synthesize_gain(certify_stationary(di_stationary), di_stationary)


_acceptance_lines = []


def record_acceptance(line: str):
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
