import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from quadflip.qp import QpInfeasibleError, QpProblem, kkt_residual, solve_qp


def test_clamped_scalar():
    res = solve_qp(QpProblem(H=[[2.0]], g=[-6.0], C=[[1.0]], lo=[0.0], hi=[1.0]))
    assert res.u[0] == pytest.approx(1.0, abs=1e-9)
    assert res.z[0] > 0                       # upper bound active
    assert res.kkt_residual < 1e-8


def test_unconstrained_matches_linear_solve():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 6))
    H = M @ M.T + np.eye(6)
    g = rng.normal(size=6)
    res = solve_qp(QpProblem(H=H, g=g))
    np.testing.assert_allclose(res.u, np.linalg.solve(H, -g), atol=1e-9)


def test_equality_constraints_match_kkt_system():
    rng = np.random.default_rng(1)
    H = np.diag(rng.uniform(1, 3, 5))
    g = rng.normal(size=5)
    A = rng.normal(size=(2, 5))
    b = rng.normal(size=2)
    K = np.block([[H, A.T], [A, np.zeros((2, 2))]])
    sol = np.linalg.solve(K, np.r_[-g, b])
    res = solve_qp(QpProblem(H=H, g=g, A=A, b=b))
    np.testing.assert_allclose(res.u, sol[:5], atol=1e-8)


def test_one_sided_rows():
    # min ½‖u‖² - u0 - u1  s.t. u0 + u1 ≤ 1
    res = solve_qp(QpProblem(H=np.eye(2), g=[-1.0, -1.0], C=[[1.0, 1.0]], lo=[-np.inf], hi=[1.0]))
    np.testing.assert_allclose(res.u, [0.5, 0.5], atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_qps_match_slsqp(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 7), rng.integers(1, 8)
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    C = rng.normal(size=(m, n))
    lo = -rng.uniform(0.1, 1.0, m)             # u = 0 is strictly feasible
    hi = rng.uniform(0.1, 1.0, m)
    p = QpProblem(H=H, g=g, C=C, lo=lo, hi=hi)
    res = solve_qp(p)
    cons = [{"type": "ineq", "fun": lambda u: hi - C @ u, "jac": lambda u: -C},
            {"type": "ineq", "fun": lambda u: C @ u - lo, "jac": lambda u: C}]
    ref = minimize(p.objective, np.zeros(n), jac=lambda u: H @ u + g, constraints=cons, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 500})
    assert res.objective <= ref.fun + 1e-8
    assert np.max(p.violation(res.u)) < 1e-8
    assert kkt_residual(p, res.u, res.z, res.nu) < 1e-6


def test_infeasible_box_is_reported():
    with pytest.raises(QpInfeasibleError):
        QpProblem(H=np.eye(1), g=[0.0], C=[[1.0]], lo=[2.0], hi=[1.0])
    p = QpProblem(H=np.eye(2), g=[0.0, 0.0], C=[[1.0, 0.0], [1.0, 0.0]], lo=[1.0, -np.inf], hi=[np.inf, 0.0])
    with pytest.raises(QpInfeasibleError) as info:
        solve_qp(p)
    assert info.value.violation > 0


def test_shape_validation():
    with pytest.raises(ValueError):
        QpProblem(H=np.eye(2), g=[0.0])
