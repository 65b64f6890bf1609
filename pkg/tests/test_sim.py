import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadflip import feedforward as ff
from quadflip.rigid import ControlInput, RigidState, VehicleParams, mix, rot_y
from quadflip.sim import (
    EscapeError,
    RollPitchDisturbance,
    SimLog,
    ZeroOrderHold,
    kinetic_energy,
    planar_rk4,
    rk4_step,
    rollout,
)

P = VehicleParams()
SPIN = RigidState.make(np.zeros(3), np.zeros(3), np.eye(3), np.array([3.0, -2.0, 1.0]))


def _integrate(x, u, h, T, d=None):
    for _ in range(int(round(T / h))):
        x = rk4_step(x, u, P, d, h)
    return x


def test_free_fall_is_exact():
    x = _integrate(RigidState.hover(), ControlInput(0.0), 1e-3, 0.5)
    assert x.r[2] == pytest.approx(0.5 * P.g * 0.25, rel=1e-12)
    assert x.v[2] == pytest.approx(P.g * 0.5, rel=1e-12)


def test_hover_is_equilibrium():
    x = _integrate(RigidState.hover(), ControlInput(P.hover_thrust), 1e-3, 1.0)
    np.testing.assert_allclose(x.r, 0.0, atol=1e-14)


def test_rk4_fourth_order():
    u = ControlInput(0.2, np.array([2e-6, -1e-6, 5e-7]))
    x0 = RigidState.make(np.zeros(3), np.array([0.1, 0, 0]), rot_y(0.3), np.array([4.0, -3.0, 2.0]))
    ref = _integrate(x0, u, 1e-4, 0.2)
    errs = [np.linalg.norm(_integrate(x0, u, h, 0.2).as_vector() - ref.as_vector()) for h in (4e-3, 2e-3, 1e-3)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 3.7), orders


def test_torque_free_spin_conserves_energy_and_momentum():
    x = _integrate(SPIN, ControlInput(0.0), 1e-3, 2.0)
    L0 = SPIN.R @ P.J @ SPIN.w
    L1 = x.R @ P.J @ x.w
    np.testing.assert_allclose(L1, L0, rtol=1e-7)
    rot = lambda s: 0.5 * s.w @ P.J @ s.w
    assert rot(x) == pytest.approx(rot(SPIN), rel=1e-7)


def test_orthonormality_and_quaternion_mirror():
    x = _integrate(SPIN, ControlInput(0.0), 1e-3, 1.0)
    x.check(1e-12)


def test_step_size_contract():
    with pytest.raises(ValueError):
        rk4_step(SPIN, ControlInput(0.0), P, None, 0.02)


def test_disturbance_matches_half_angle_sine():
    d = RollPitchDisturbance()
    for phi, th in [(0.3, -0.4), (0.0, 2.5), (-1.0, 0.2)]:
        R = np.array([[1, 0, 0], [0, math.cos(phi), -math.sin(phi)], [0, math.sin(phi), math.cos(phi)]])
        x = RigidState.hover(R=rot_y(th) @ R)
        _, tau = d(x)
        np.testing.assert_allclose(tau, np.array([-0.007, -0.007, 0.0]) * math.sin(phi / 2 + th / 2), atol=1e-12)


def test_planar_agrees_with_full_model():
    s = ff.expand_schedule(ff.REFERENCE_ETA, P)
    _, xp = ff.simulate_planar(s, P, 1e-3)
    _, states, _ = ff.simulate_3d(s, P, 1e-3)
    assert np.max(np.abs(xp - ff.planar_from_3d(states))) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0, 0.16), min_size=2, max_size=2),
       st.floats(-3, 3))
def test_planar_step_matches_full_step(T, th):
    T = np.array([T[0], T[1], T[1], T[0]])      # pure pitch input
    x = RigidState.hover(R=rot_y(th))
    x = RigidState.make(np.zeros(3), np.array([0.2, 0, -0.1]), x.R, np.array([0, 1.5, 0]))
    y = rk4_step(x, mix(T, P), P, None, 1e-3)
    xp = planar_rk4([0, 0, th, 0.2, -0.1, 1.5], T, P, 1e-3)
    assert y.r[0] == pytest.approx(xp[0], abs=1e-12)
    assert y.r[2] == pytest.approx(xp[1], abs=1e-12)
    assert y.w[1] == pytest.approx(xp[5], abs=1e-12)


def test_rollout_escape():
    with pytest.raises(EscapeError):
        rollout(RigidState.hover(), lambda t, x: ControlInput(0.0), P, T=5.0, h=1e-2, escape_radius=1.0)


def test_rollout_rejects_non_multiple_duration():
    with pytest.raises(ValueError):
        rollout(RigidState.hover(), lambda t, x: ControlInput(0.0), P, T=0.0105, h=1e-3)


def test_zero_order_hold_updates_once_per_period():
    calls = []

    def ctl(t, x):
        calls.append(t)
        return ControlInput(P.hover_thrust)

    zoh = ZeroOrderHold(ctl, 2e-3)
    log = rollout(RigidState.hover(), zoh, P, T=0.1, h=5e-4)
    assert zoh.updates == 51
    np.testing.assert_allclose(np.diff(calls), 2e-3, atol=1e-12)
    assert len(log.t) == 201


def test_simlog_csv_roundtrip(tmp_path):
    log = rollout(SPIN, lambda t, x: ControlInput(0.1), P, T=0.01, h=1e-3,
                  observer=lambda t, x, u: {"ke": kinetic_energy(x, P)})
    path = tmp_path / "traj.csv"
    log.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["t", "x", "y", "z"] and header[-1] == "ke"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_allclose(data[:, :18], log.array())
    with pytest.raises(ValueError):
        SimLog(t=np.zeros(2), states=[SPIN], inputs=[])
