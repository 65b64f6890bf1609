import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadflip import gp
from quadflip.control import (
    AdaptiveModel,
    GeomGains,
    GeometricController,
    ReferencePoint,
    adaptive_terms,
    attitude_error_psi,
    control_law,
    desired_attitude_from_force,
    e_A_vector,
    e_B_vector,
    lyapunov_diagnostics,
    robust_terms,
    tracking_errors,
    v2_rate,
    w2_matrix,
)
from quadflip.rigid import E3, RigidState, VehicleParams, rot_y, rotm_axis_angle
from quadflip.sim import rk4_step, rollout

P = VehicleParams()
G = GeomGains()
small = st.floats(-1, 1)
vec3 = st.tuples(small, small, small).map(np.array)


def test_gain_validation():
    with pytest.raises(ValueError):
        GeomGains(k_r=0.0)
    with pytest.raises(ValueError):
        GeomGains(tau_exp=2.0)


def test_hover_input_at_zero_error():
    out = control_law(RigidState.hover(), ReferencePoint.hover(), G, P)
    assert out.u.F == pytest.approx(P.mass * P.g)
    np.testing.assert_allclose(out.u.tau, 0.0, atol=1e-15)
    assert not out.saturated


def test_zero_error_gives_feedforward_torque():
    w_d, dw_d = np.array([0.0, 5.0, 0.0]), np.array([0.0, 30.0, 0.0])
    R = rot_y(0.7)
    x = RigidState.make(np.zeros(3), np.zeros(3), R, w_d)
    ref = ReferencePoint(R_d=R, w_d=w_d, dw_d=dw_d)
    out = control_law(x, ref, G, P, apply_saturation=False)
    np.testing.assert_allclose(out.u.tau, np.cross(w_d, P.J @ w_d) + P.J @ dw_d, atol=1e-15)
    # thrust projects the commanded force on the body z axis
    A = -P.mass * P.g * E3
    assert out.u.F == pytest.approx(-A @ (R @ E3))


@given(vec3, st.floats(-3, 3))
def test_error_definitions(axis, angle):
    if np.linalg.norm(axis) < 1e-3:
        return
    R = rotm_axis_angle(axis, angle)
    x = RigidState.hover(R=R)
    _, _, e_R, _ = tracking_errors(x, ReferencePoint.hover())
    psi = attitude_error_psi(R, np.eye(3))
    assert psi == pytest.approx(1 - math.cos(angle), abs=1e-12)
    assert np.linalg.norm(e_R) == pytest.approx(abs(math.sin(angle)), abs=1e-12)


def test_desired_attitude_from_force():
    A = np.array([0.1, -0.05, -0.3])
    Rd = desired_attitude_from_force(A)
    np.testing.assert_allclose(Rd.T @ Rd, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(Rd[:, 2], -A / np.linalg.norm(A))
    assert Rd[0, 1] == pytest.approx(0.0, abs=1e-12)      # body y stays horizontal-in-heading
    np.testing.assert_allclose(desired_attitude_from_force(np.zeros(3)), np.eye(3))


@settings(max_examples=200)
@given(vec3, vec3, st.floats(1e-4, 0.05), vec3)
def test_robust_attitude_term_bounds_the_residual(e_R, e_w, delta, u):
    e_A = e_A_vector(e_R, e_w, G, P)
    dist = delta * u / max(1.0, np.linalg.norm(u))          # ‖Δ - η‖ ≤ δ
    _, mu_R = robust_terms(np.zeros(3), np.zeros(3), e_R, e_w, G, P, 0.0, delta)
    assert e_A @ (dist + mu_R) <= G.eps_R * (1 + 1e-9)


@settings(max_examples=200)
@given(vec3, vec3, st.floats(1e-4, 0.05), vec3)
def test_robust_position_term_bounds_the_residual(e_r, e_v, delta, u):
    e_B = e_B_vector(e_r, e_v, G, P)
    dist = delta * u / max(1.0, np.linalg.norm(u))
    mu_r, _ = robust_terms(e_r, e_v, np.zeros(3), np.zeros(3), G, P, delta, 0.0)
    assert e_B @ (dist + mu_r) <= G.eps_r * (1 + 1e-9)


def test_robust_terms_vanish_without_uncertainty():
    mu_r, mu_R = robust_terms(np.ones(3), np.ones(3), np.ones(3), np.ones(3), G, P, 0.0, 0.0)
    np.testing.assert_array_equal(mu_r, 0.0)
    np.testing.assert_array_equal(mu_R, 0.0)
    with pytest.raises(ValueError):
        robust_terms(np.ones(3), np.ones(3), np.ones(3), np.ones(3), G, P, -1.0, 0.0)


def test_v2_rate_matches_finite_difference():
    ref_R = rot_y(0.4)
    x = RigidState.make(np.zeros(3), np.zeros(3), rotm_axis_angle([1, 2, 0.5], 0.6), np.array([1.0, -2.0, 0.5]))
    ref = ReferencePoint(R_d=ref_R, w_d=np.zeros(3), dw_d=np.zeros(3))
    out = control_law(x, ref, G, P, apply_saturation=False)
    w_dot = np.linalg.solve(P.J, out.u.tau - np.cross(x.w, P.J @ x.w))
    h = 1e-6
    xp = rk4_step(x, out.u, P, None, h)
    V0 = lyapunov_diagnostics(x, ref, G, P)["V2"]
    V1 = lyapunov_diagnostics(xp, ref, G, P)["V2"]
    assert v2_rate(x, ref, w_dot, G, P) == pytest.approx((V1 - V0) / h, rel=1e-4)


def test_w2_with_default_gains_is_indefinite():
    # the c2 * k_w / λ_min coupling dominates for this inertia
    assert np.min(np.linalg.eigvalsh(w2_matrix(G, P))) < 0
    soft = GeomGains(c2=1e-4)
    assert np.min(np.linalg.eigvalsh(w2_matrix(soft, P))) > 0


def _table(value, std, grids=None):
    grids = grids or tuple(np.linspace(-1, 1, 3) for _ in range(4))
    shape = tuple(len(g) for g in grids)
    return gp.LookupTable(grids, np.full(shape, value), np.full(shape, std))


def test_adaptive_model_bounds_and_terms():
    am = AdaptiveModel(_table(1e-3, 3e-4), _table(-2e-3, 4e-4))
    assert am.delta_R == pytest.approx(2 * 5e-4)
    assert AdaptiveModel(_table(0, 3e-4), _table(0, 4e-4), aggregation="max").delta_R == pytest.approx(8e-4)
    eta, dh = adaptive_terms(am, RigidState.hover())
    np.testing.assert_allclose(eta, [1e-3, -2e-3, 0.0])
    assert am.clamp_count == 0
    adaptive_terms(am, RigidState.make(np.zeros(3), np.zeros(3), np.eye(3), np.array([5.0, 0, 0])))
    assert am.clamp_count == 1
    with pytest.raises(ValueError):
        AdaptiveModel(_table(0, 0), _table(0, 0), aggregation="sum")


def test_adaptive_mean_cancels_a_constant_disturbance():
    bias = np.array([2e-4, -1e-4, 0.0])
    am = AdaptiveModel(_table(bias[0], 0.0), _table(bias[1], 0.0))
    d = lambda x: (np.zeros(3), bias)
    runs = {}
    for mode in ("nominal", "adaptive"):
        ctl = GeometricController(P, lambda t: ReferencePoint.hover(), G, mode=mode, adaptive=am)
        log = rollout(RigidState.hover(), ctl, P, d, T=1.0, h=1e-3, observer=ctl.observer)
        runs[mode] = np.max(log.diagnostics["psi"])
    assert runs["adaptive"] < 1e-12 < runs["nominal"]


def test_controller_mode_validation():
    with pytest.raises(ValueError):
        GeometricController(P, lambda t: ReferencePoint.hover(), mode="bogus")
    with pytest.raises(ValueError):
        GeometricController(P, lambda t: ReferencePoint.hover(), mode="robust")


def test_position_mode_recovers_from_offset():
    ctl = GeometricController(P, lambda t: ReferencePoint(), G)
    # offsets large enough to pin F at F_max leave no torque under the clamp policy
    x0 = RigidState.hover(r=(0.02, -0.01, 0.01), R=rotm_axis_angle([1, 1, 0], 0.05))
    log = rollout(x0, ctl, P, T=6.0, h=1e-3, observer=ctl.observer)
    assert np.linalg.norm(log.states[-1].r) < 1e-6
    assert log.diagnostics["psi"][-1] < 1e-10
