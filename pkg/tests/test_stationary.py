import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsteer.errors import PreconditionError
from covsteer.model import GaussianSpec, LinearGaussianSystem, StationaryProblem
from covsteer.numerics import solve_algebraic_lyapunov, solve_care
from covsteer.stationary import (
    StationaryController,
    certify_stationary,
    min_power_X,
    regularize_epsilon,
    solve_min_power,
    synthesize_gain,
    verify_proposition1,
)

from conftest import scalar_system

SIGMA_HAT = np.array([[0.5 - np.sqrt(0.002), -0.1], [-0.1, 0.5 - np.sqrt(0.2)]])


def test_certificate_double_integrator(di_stationary):
    cert = certify_stationary(di_stationary)
    assert cert.assignable and cert.rank_ok
    np.testing.assert_allclose(cert.X, [[-0.5], [-0.5]], atol=1e-10)
    assert cert.gap == pytest.approx(np.linalg.eigvalsh(SIGMA_HAT)[0])
    np.testing.assert_allclose(cert.P, [[np.sqrt(0.002), 0.1], [0.1, np.sqrt(0.2)]], atol=1e-12)


def test_rank_condition_fails_for_correlated_target(di):
    cert = certify_stationary(StationaryProblem(di, GaussianSpec([[1.0, 0.3], [0.3, 1.0]])))
    assert not cert.rank_ok and not cert.assignable
    # (1,1) entry 2*0.3 of A Sigma + Sigma A' cannot be cancelled by B X' + X B'
    assert cert.residual == pytest.approx(0.6)
    assert "rank condition" in cert.diagnosis()
    with pytest.raises(PreconditionError):
        synthesize_gain(cert, StationaryProblem(di, GaussianSpec([[1.0, 0.3], [0.3, 1.0]])))


def test_scalar_example():
    problem = StationaryProblem(scalar_system(), GaussianSpec([[2.0]]))
    cert = certify_stationary(problem)
    assert cert.X[0, 0] == pytest.approx(-0.5)
    assert cert.gap == pytest.approx(1.0)
    ctrl = synthesize_gain(cert, problem)
    assert ctrl.K[0, 0] == pytest.approx(0.5)
    assert ctrl.abscissa == pytest.approx(-0.5)
    mp = solve_min_power(problem)
    assert mp.power == pytest.approx(0.25)
    rep = verify_proposition1(mp, problem)
    assert rep.passed and rep.Pi[0, 0] == pytest.approx(0.5)


def test_gain_and_power(di_controller):
    np.testing.assert_allclose(di_controller.K, [[5.4440, 19.7854]], atol=1e-3)
    assert di_controller.hurwitz and di_controller.epsilon == 0.0
    # K Sigma_hat = -X' = [0.5, 0.5]
    np.testing.assert_allclose(di_controller.K @ SIGMA_HAT, [[0.5, 0.5]], atol=1e-9)
    oracle = (di_controller.K @ SIGMA_HAT @ di_controller.K.T).item()
    assert di_controller.power == pytest.approx(oracle, rel=1e-10)
    assert di_controller.power == pytest.approx(12.615, abs=1e-3)


def test_lyapunov_split_cross_check(di, di_controller):
    S_hat = solve_algebraic_lyapunov(di.A - di.B @ di_controller.K, di_controller.filter.innovation_forcing(di))
    np.testing.assert_allclose(S_hat, 0.5 * np.eye(2) - di_controller.filter.P, atol=1e-8)


def test_joint_stationary_covariance(di, di_controller):
    """The 2n x 2n Lyapunov equation of (x, x - xhat) gives blocks [[Sigma, P], [P, P]]."""
    K, L, P = di_controller.K, di_controller.L, di_controller.filter.P
    Abig = np.block([[di.A - di.B @ K, di.B @ K], [np.zeros((2, 2)), di.A - L @ di.C]])
    Q1 = di.process_noise
    Qbig = np.block([[Q1, Q1], [Q1, Q1 + L @ di.measurement_cov @ L.T]])
    S = solve_algebraic_lyapunov(Abig, Qbig)
    np.testing.assert_allclose(S[:2, :2], 0.5 * np.eye(2), atol=1e-8)
    np.testing.assert_allclose(S[2:, 2:], P, atol=1e-8)
    np.testing.assert_allclose(S[:2, 2:], P, atol=1e-8)


def test_min_power_unique_case(di_stationary):
    ctrl = solve_min_power(di_stationary)
    np.testing.assert_allclose(ctrl.X, [[-0.5], [-0.5]], atol=1e-10)
    assert ctrl.power == pytest.approx(12.615, abs=1e-3)
    np.testing.assert_allclose(solve_min_power(di_stationary, weight="sigma").K, ctrl.K)


def _full_input_system(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((2, 2)) - 2 * np.eye(2)
    return LinearGaussianSystem(A, np.eye(2), rng.standard_normal((2, 2)), np.eye(2), np.eye(2) * 0.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_min_power_full_input_grid_search(seed):
    sys_ = _full_input_system(seed)
    P = solve_care(sys_)
    Sigma = P + np.eye(2) * 0.7 + 0.1
    problem = StationaryProblem(sys_, GaussianSpec(Sigma))
    cert = certify_stationary(problem)
    assert cert.assignable
    X = min_power_X(cert, problem)
    W_inv = np.linalg.inv(Sigma - P)
    f = lambda X: np.trace(X.T @ W_inv @ X)
    # solutions are X + skew(s); the grid must not beat the KKT point
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    grid = np.linspace(-2, 2, 4001)
    best = min(f(X + s * J) for s in grid)
    assert f(X) <= best + 1e-12
    assert f(X + 1e-3 * J) > f(X)


def test_min_power_identity_weight_is_half_rhs():
    sys_ = _full_input_system(3)
    P = solve_care(sys_)
    Sigma = P + np.eye(2)  # Sigma_hat = I
    problem = StationaryProblem(sys_, GaussianSpec(Sigma))
    cert = certify_stationary(problem)
    W = sys_.A @ Sigma + Sigma @ sys_.A.T + sys_.process_noise
    np.testing.assert_allclose(min_power_X(cert, problem), -W / 2, atol=1e-10)


def test_necessity_target_below_p_not_assignable():
    sys_ = _full_input_system(4)
    P = solve_care(sys_)
    delta = 1e-3 * np.linalg.eigvalsh(P)[0]
    cert = certify_stationary(StationaryProblem(sys_, GaussianSpec(P - delta * np.eye(2))))
    assert cert.rank_ok
    assert cert.gap < 0 and not cert.assignable


def test_epsilon_scheme_order(di_stationary, di_controller):
    ratios = []
    for eps in (0.04, 0.02, 0.01):
        reg = regularize_epsilon(di_controller, di_stationary, eps)
        assert reg.epsilon == eps and reg.hurwitz
        Delta = 0.5 * np.eye(2) - reg.Sigma_achieved
        assert np.linalg.eigvalsh(Delta)[0] >= -1e-12
        ratios.append(np.linalg.norm(Delta) / eps)
    for a, b in zip(ratios, ratios[1:]):
        assert 0.5 <= a / b <= 2.0


def test_epsilon_doubles_until_stable():
    # a = 1 with nominal K = 0: K_eps = eps / (2 Sigma_hat) stabilizes once eps > 2 Sigma_hat
    sys_ = scalar_system(1.0)
    problem = StationaryProblem(sys_, GaussianSpec([[5.0]]))
    cert = certify_stationary(problem)
    S_hat = 5.0 - cert.P[0, 0]
    nominal = StationaryController(np.zeros((1, 1)), cert.filter, False, 0.0, np.array([[5.0]]), 0.0)
    reg = regularize_epsilon(nominal, problem, 0.1)
    k = int(np.ceil(np.log2(2 * S_hat / 0.1)))
    expected = 0.1 * 2.0 ** k
    if 1 - expected / (2 * S_hat) >= -1e-6:
        expected *= 2
    assert reg.epsilon == pytest.approx(expected)
    assert reg.hurwitz
    assert reg.K[0, 0] == pytest.approx(expected / (2 * S_hat))
    # achieved variance solves the scalar Lyapunov equation
    acl = 1 - reg.K[0, 0]
    assert reg.Sigma_achieved[0, 0] == pytest.approx(cert.P[0, 0] + cert.filter.L[0, 0] ** 2 / (-2 * acl))
    with pytest.raises(PreconditionError):
        regularize_epsilon(nominal, problem, 0.0)


def test_proposition1_double_integrator(di_stationary, di_controller):
    rep = verify_proposition1(di_controller, di_stationary)
    assert rep.passed
    np.testing.assert_allclose(rep.Pi, rep.Pi.T)
    np.testing.assert_allclose(di_stationary.system.B.T @ rep.Pi, di_controller.K, atol=1e-12)
    assert rep.lyapunov_residual < 1e-8


def test_proposition1_zero_gain_fails_residual():
    sys_ = scalar_system(-1.0)
    problem = StationaryProblem(sys_, GaussianSpec([[2.0]]))
    filt = certify_stationary(problem).filter
    ctrl = StationaryController(np.zeros((1, 1)), filt, True, 0.0, np.array([[2.0]]), 0.0)
    rep = verify_proposition1(ctrl, problem)
    # 2 a Sigma_hat + L^2 D^2 with a = -1 is not zero for this Sigma_hat
    S_hat = 2.0 - filt.P[0, 0]
    assert rep.lyapunov_residual == pytest.approx(abs(-2 * S_hat + filt.L[0, 0] ** 2))
    assert not rep.passed


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_certificate_normal_equations_and_linearcons(seed, scale):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    sys_ = LinearGaussianSystem(A, rng.standard_normal((3, 2)), rng.standard_normal((3, 1)),
                                rng.standard_normal((1, 3)), [[0.5]])
    G = rng.standard_normal((3, 3))
    Sigma = solve_care(sys_) + scale * (G @ G.T + 0.1 * np.eye(3))
    problem = StationaryProblem(sys_, GaussianSpec(Sigma))
    cert = certify_stationary(problem)
    B = sys_.B
    R = A @ cert.Sigma + cert.Sigma @ A.T + sys_.process_noise + B @ cert.X.T + cert.X @ B.T
    # normal equations: the residual is orthogonal to the range of X -> BX' + XB', i.e. R B = 0
    np.testing.assert_allclose(R @ B, 0.0, atol=1e-9 * (1 + np.linalg.norm(Sigma)) * (1 + np.linalg.norm(R)))
    if cert.assignable:
        ctrl = synthesize_gain(cert, problem)
        if ctrl.hurwitz:
            S_hat = solve_algebraic_lyapunov(A - B @ ctrl.K, ctrl.filter.innovation_forcing(sys_))
            np.testing.assert_allclose(S_hat, Sigma - cert.P, atol=1e-8 * (1 + np.linalg.norm(Sigma)))


def test_json_summaries(di_stationary, di_controller):
    cert = certify_stationary(di_stationary)
    d = cert.to_dict()
    assert d["assignable"] is True and set(d) >= {"gap", "X", "P", "rank_ok"}
    c = di_controller.to_dict()
    assert set(c) >= {"K", "P", "X", "power", "hurwitz", "epsilon"}
