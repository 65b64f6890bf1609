import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadflip import feedforward as ff
from quadflip.rigid import VehicleParams, unmix

P = VehicleParams()
BOX = ff.Envelope().bounds(P)
eta_strategy = st.tuples(*[st.floats(lo, hi) for lo, hi in zip(BOX.lower, BOX.upper)])


def test_max_pitch_acc():
    assert ff.max_pitch_acc(P) == pytest.approx(2 * P.l * P.t_max / P.jyy)
    assert ff.max_pitch_acc(P) == pytest.approx(743.47, abs=0.01)


@settings(max_examples=60, deadline=None)
@given(eta_strategy)
def test_closure_rule_gives_full_turn_at_rest(eta):
    s = ff.expand_schedule(eta, P)
    acc = [ph.theta_dd for ph in s.phases]
    th, w = ff._net_angle(acc, s.durations)
    assert th == pytest.approx(-2 * math.pi, abs=1e-10)
    assert w == pytest.approx(0.0, abs=1e-9)
    assert np.all(s.durations >= 0)


@settings(max_examples=40, deadline=None)
@given(eta_strategy)
def test_phase_thrusts_are_feasible_and_realise_the_phase(eta):
    s = ff.expand_schedule(eta, P)
    for ph in s.phases:
        T = ff.mix(ph.thrusts, P)
        _, ok = unmix(T, P, tol=1e-12)
        assert ok
        assert T.F == pytest.approx(P.mass * ph.U, rel=1e-9)
        assert T.tau[1] == pytest.approx(P.jyy * ph.theta_dd, rel=1e-9, abs=1e-15)


def test_rotation_phases_are_bang_bang():
    s = ff.expand_schedule(ff.REFERENCE_ETA, P)
    assert sorted(s.phases[1].thrusts) == pytest.approx([0, 0, P.t_max, P.t_max])
    assert sorted(s.phases[3].thrusts) == pytest.approx([0, 0, P.t_max, P.t_max])


def test_schedule_lookup():
    s = ff.expand_schedule(ff.REFERENCE_ETA, P)
    b = s.boundaries
    assert s.phase_index(0.0) == 0
    assert s.phase_index(b[2] + 1e-6) == 2
    assert s.phase_index(s.total) == 4
    with pytest.raises(ValueError):
        s.phase_index(s.total + 0.1)
    np.testing.assert_allclose(ff.schedule_to_rotor_thrusts(s, b[1] + 1e-6), s.phases[1].thrusts)


def test_bounds_are_enforced():
    with pytest.raises(ValueError):
        ff.expand_schedule([25.0, 0.1, 0.1, 12.0, 0.1], P)
    with pytest.raises(ValueError):
        ff.PrimitiveParams.from_vector([1, 2, 3])


def test_infeasible_phase_names_the_phase():
    with pytest.raises(ff.InfeasibleScheduleError, match="phase 1"):
        ff.expand_schedule([30.0, 0.1, 0.1, 12.0, 0.1], P, check_bounds=False)
    f = ff.flip_objective(P)
    assert math.isnan(f(np.array([30.0, 0.1, 0.1, 12.0, 0.1])))


def test_final_state_error_components():
    e, n = ff.final_state_error(ff.REFERENCE_ETA, P)
    assert n == pytest.approx(np.linalg.norm(e))
    assert abs(e[4]) < 1e-6                    # pitch closes by construction
    # frozen from the planar RK4 rollout at h = 1 ms
    assert n == pytest.approx(0.2039, abs=5e-4)


def test_reference_eta_completes_the_turn_in_3d():
    s = ff.expand_schedule(ff.REFERENCE_ETA, P)
    _, states, _ = ff.simulate_3d(s, P, 1e-3)
    sweep = ff.pitch_unwrapped(states)
    assert sweep[-1] == pytest.approx(-2 * math.pi, abs=1e-6)
    assert np.all(np.diff(sweep) <= 1e-12)


def test_small_optimisation_returns_an_archived_point(tmp_path):
    res = ff.optimize_flip(P, n_init=8, n_iter=6, seed=0, archive_path=tmp_path / "a.csv")
    v = res.eta.as_vector()
    assert np.all(v >= BOX.lower) and np.all(v <= BOX.upper)
    assert any(np.allclose(v, x) for x in res.archive_X)
    assert res.cost == pytest.approx(ff.final_state_error(res.eta, P)[1])
    res.save(tmp_path / "eta.json")
    back = json.loads((tmp_path / "eta.json").read_text())
    assert back["n_evaluations"] == 14 and len(back["eta_vector"]) == 5


def test_schedule_csv(tmp_path):
    s = ff.expand_schedule(ff.REFERENCE_ETA, P)
    ff.export_schedule_csv(s, P, tmp_path / "s.csv")
    data = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert data[0, 0] == 0 and data[-1, 0] <= s.total
    np.testing.assert_allclose(data[:, 1:5].sum(1), data[:, 5])
