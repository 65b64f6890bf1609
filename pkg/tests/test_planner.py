import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadflip.planner import (
    FlipReference,
    PlanarBox,
    PlanningError,
    SigmoidAttitudeParams,
    attitude_reference,
    build_ltv,
    feedforward_torque,
    fit_cubic_spline,
    pitch_from_quat,
    plan_flip,
    quintic_blend,
)
from quadflip.rigid import VehicleParams, rotm_from_quat

P = VehicleParams()
A = SigmoidAttitudeParams()


@pytest.fixture(scope="module")
def plan():
    return plan_flip(A, PlanarBox(), Ts=2e-3, params=P)


def test_attitude_profile_endpoints_and_unit_norm():
    t = np.linspace(0, A.t_m, 201)
    q, w, _ = attitude_reference(t, A)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-14)
    assert q[0, 0] > 0.9999 and q[-1, 0] < -0.9999
    th = np.unwrap(2 * np.arctan2(q[:, 2], q[:, 0]))
    # the logistic starts and ends 4·exp(-ν t_m / 4) short of level
    gap = 4 * math.exp(-A.nu_m * A.t_m / 4)
    assert th[0] == pytest.approx(gap, rel=1e-3)
    assert th[-1] - th[0] == pytest.approx(2 * math.pi - 2 * gap, rel=1e-6)
    assert np.all(w[:, 1] >= 0)
    with pytest.raises(ValueError):
        attitude_reference(A.t_m + 0.1, A)


@settings(max_examples=30)
@given(st.floats(0.01, 0.69))
def test_rates_match_differentiated_quaternion(t):
    h = 1e-6
    q_p, _, _ = attitude_reference(t + h, A)
    q_m, _, _ = attitude_reference(t - h, A)
    _, w, dw = attitude_reference(t, A)
    th = lambda q: 2 * math.atan2(q[2], q[0])
    wy = (np.unwrap([th(q_m), th(q_p)])[1] - np.unwrap([th(q_m), th(q_p)])[0]) / (2 * h)
    assert w[1] == pytest.approx(wy, rel=1e-6, abs=1e-6)
    w_p = attitude_reference(t + h, A)[1][1]
    w_m = attitude_reference(t - h, A)[1][1]
    assert dw[1] == pytest.approx((w_p - w_m) / (2 * h), rel=1e-5, abs=1e-3)


def test_pitch_from_quat():
    q, _, _ = attitude_reference(np.array([0.0, 0.35, 0.7]), A)
    th = pitch_from_quat(q)
    assert th[1] == pytest.approx(math.pi, abs=1e-9) or th[1] == pytest.approx(-math.pi, abs=1e-9)
    assert abs(th[0]) < 1e-2 and abs(th[2]) < 1e-2


def test_feedforward_torque_is_euler_equation():
    w = np.array([[0.1, 2.0, -0.3]])
    dw = np.array([[1.0, 5.0, 0.0]])
    np.testing.assert_allclose(feedforward_torque(w, dw, P)[0], np.cross(w[0], P.J @ w[0]) + P.J @ dw[0])


def test_ltv_prediction_matrices_match_propagation():
    m = build_ltv(A, 2e-3, params=P)
    u = np.random.default_rng(0).uniform(0, 0.6, m.N)
    z = m.propagate(u)
    Px, Pz = m.prediction_matrices()
    np.testing.assert_allclose(Px @ u, z[1:, 0], atol=1e-14)
    np.testing.assert_allclose(Pz @ u, z[1:, 2], atol=1e-14)


def test_ltv_is_exact_for_attitude_held_over_each_step():
    m = build_ltv(A, 2e-3, params=P)
    assert m.N == 350
    u = np.random.default_rng(1).uniform(0, 0.6, m.N)
    q, _, _ = attitude_reference(np.arange(m.N) * m.Ts, A)
    r, v = np.zeros(3), np.zeros(3)
    for k in range(m.N):
        R = rotm_from_quat(q[k])
        acc = P.g * np.array([0, 0, 1.0]) - u[k] / P.mass * R[:, 2]
        r, v = r + v * m.Ts + 0.5 * acc * m.Ts ** 2, v + acc * m.Ts
    z = m.propagate(u)[-1]
    assert z[0] == pytest.approx(r[0], abs=1e-12)
    assert z[2] + m.gravity_offset(m.N) == pytest.approx(r[2], abs=1e-12)


def test_plan_meets_constraints(plan):
    assert plan.kkt_residual < 1e-6
    assert plan.max_violation <= 1e-8
    assert plan.terminal_error < 0.02
    assert np.all(plan.u >= plan.u_lo - 1e-8) and np.all(plan.u <= plan.u_hi + 1e-8)
    pos = plan.positions
    assert pos[:, 0].min() >= -0.15 - 1e-8 and pos[:, 0].max() <= 1e-8
    assert (-pos[:, 1]).min() >= -1e-8 and (-pos[:, 1]).max() <= 0.3 + 1e-8


def test_thrust_bounds_reserve_torque(plan):
    reserve = np.linalg.norm(plan.tau, axis=1) / P.l
    np.testing.assert_allclose(plan.u_lo, reserve)
    np.testing.assert_allclose(plan.u_hi, P.f_max - reserve)


def test_unreachable_box_raises():
    with pytest.raises(PlanningError):
        plan_flip(A, PlanarBox(x_min=-0.15, x_max=0.0, h_min=0.0, h_max=0.0), f_max=0.3, params=P)
    with pytest.raises(PlanningError, match="empty"):
        plan_flip(SigmoidAttitudeParams(nu_m=80.0), PlanarBox.unbounded(), params=P)


def test_spline_validation_and_interpolation():
    t = np.linspace(0, 1, 11)
    s = fit_cubic_spline(t, t ** 3)
    np.testing.assert_allclose(s(t), t ** 3)
    assert s(1.0, 2) == pytest.approx(0.0, abs=1e-12)   # natural end condition
    assert fit_cubic_spline(t, t ** 3, v0=0.0)(0.0, 1) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_cubic_spline([0, 1, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        fit_cubic_spline([0, 1], [0, 1])


def test_quintic_blend_endpoints():
    f = quintic_blend([0.1, 0, -0.2], [0.5, 0, 1.0], [2.0, 0, -3.0], 1.0)
    p0, v0, a0 = f(0.0)
    np.testing.assert_allclose([p0, v0, a0], [[0.1, 0, -0.2], [0.5, 0, 1.0], [2.0, 0, -3.0]])
    for arr in f(1.0):
        np.testing.assert_allclose(arr, 0.0, atol=1e-12)


def test_reference_is_continuous_and_ends_at_rest(plan, tmp_path):
    ref = FlipReference(plan)
    a, b = ref.flip_window
    for t in (a, b):
        r0, r1 = ref(t - 1e-7), ref(t + 1e-7)
        np.testing.assert_allclose(r0.r_d, r1.r_d, atol=1e-6)
        np.testing.assert_allclose(r0.v_d, r1.v_d, atol=1e-4)
    end = ref(ref.duration)
    np.testing.assert_allclose(end.r_d, 0.0, atol=1e-12)
    np.testing.assert_allclose(end.v_d, 0.0, atol=1e-12)
    assert ref(0.0).R_d is None and ref(a + 0.1).R_d is not None
    ref.to_csv(tmp_path / "r.csv", dt=1e-2)
    ref.to_json(tmp_path / "r.json")
    data = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == len(FlipReference.COLUMNS)
    assert json.loads((tmp_path / "r.json").read_text())["qp"]["N"] == 350
    with pytest.raises(ValueError):
        FlipReference(plan, t_post=0.5, t_rec=1.0)
