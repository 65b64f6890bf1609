"""Five-phase bang-bang backflip primitive.

The primitive is parametrised by ``η = [U1, t1, t3, U5, t5]``. The rotation
phases 2 and 4 run at the largest pitch acceleration the rotors allow. Their
durations come from a closure rule: the flip turns by exactly ``-2π`` and ends
with zero pitch rate.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from . import bayesopt
from .rigid import ControlInput, RigidState, VehicleParams, mix
from .sim import Disturbance, planar_rk4, rk4_step

PHASE_NAMES = ("accelerate", "start-rotation", "coast", "stop-rotation", "recover")


class InfeasibleScheduleError(ValueError):
    def __init__(self, phase: int, message: str):
        super().__init__(f"phase {phase} ({PHASE_NAMES[phase - 1]}): {message}")
        self.phase = phase


@dataclass(frozen=True)
class PrimitiveParams:
    U1: float
    t1: float
    t3: float
    U5: float
    t5: float

    @classmethod
    def from_vector(cls, eta: Sequence[float]) -> "PrimitiveParams":
        if len(eta) != 5:
            raise ValueError("η has five entries [U1, t1, t3, U5, t5]")
        return cls(*map(float, eta))

    def as_vector(self) -> np.ndarray:
        return np.array([self.U1, self.t1, self.t3, self.U5, self.t5])


REFERENCE_ETA = PrimitiveParams(17.8, 0.14, 0.2, 17.8, 0.12)


@dataclass(frozen=True)
class Envelope:
    """Envelope constants shared by every schedule.

    ``beta_frac`` sets the small pitch acceleration of phases 1 and 5 as a fraction
    of the rotation-phase maximum; ``u_coast`` is the coast collective acceleration.
    """

    beta_frac: float = 0.05
    u_coast: float = 2.0
    u_min: Optional[float] = None     # defaults to g
    u_max: float = 18.0
    t_min: float = 0.05
    t_max: float = 0.3

    def bounds(self, params: VehicleParams) -> bayesopt.SearchBox:
        u_lo = params.g if self.u_min is None else self.u_min
        return bayesopt.SearchBox(
            lower=np.array([u_lo, self.t_min, self.t_min, u_lo, self.t_min]),
            upper=np.array([self.u_max, self.t_max, self.t_max, self.u_max, self.t_max]),
        )


def max_pitch_acc(params: VehicleParams) -> float:
    """Pitch acceleration with one rotor pair at ``t_max`` and the other off."""
    return 2.0 * params.l * params.t_max / params.jyy


@dataclass(frozen=True)
class Phase:
    duration: float
    U: float
    theta_dd: float
    T_front: float   # rotors 1 and 4
    T_back: float    # rotors 2 and 3

    @property
    def thrusts(self) -> np.ndarray:
        return np.array([self.T_front, self.T_back, self.T_back, self.T_front])


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple

    @property
    def durations(self) -> np.ndarray:
        return np.array([p.duration for p in self.phases])

    @property
    def total(self) -> float:
        return float(self.durations.sum())

    @property
    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def phase_index(self, t: float) -> int:
        if not (0.0 <= t <= self.total + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.total}]")
        b = self.boundaries
        for i in range(len(self.phases)):
            if t < b[i + 1] and self.phases[i].duration > 0:
                return i
        return max(i for i, p in enumerate(self.phases) if p.duration > 0)


def _pair_split(F: float, tau_y: float, params: VehicleParams) -> tuple[float, float]:
    return (F + tau_y / params.l) / 4.0, (F - tau_y / params.l) / 4.0


def _phase(idx: int, duration: float, U: float, theta_dd: float, params: VehicleParams) -> Phase:
    F = params.mass * U
    Tf, Tb = _pair_split(F, params.jyy * theta_dd, params)
    tol = 1e-12
    if min(Tf, Tb) < -tol or max(Tf, Tb) > params.t_max + tol:
        raise InfeasibleScheduleError(idx, f"rotor thrusts ({Tf:.4g}, {Tb:.4g}) N outside [0, {params.t_max}]")
    if duration < 0:
        raise InfeasibleScheduleError(idx, f"negative duration {duration:.4g} s")
    return Phase(duration, U, theta_dd, min(max(Tf, 0.0), params.t_max), min(max(Tb, 0.0), params.t_max))


def _net_angle(acc: Sequence[float], dur: Sequence[float]) -> tuple[float, float]:
    th, w = 0.0, 0.0
    for a, d in zip(acc, dur):
        th += w * d + 0.5 * a * d * d
        w += a * d
    return th, w


def rotation_durations(eta: PrimitiveParams, params: VehicleParams, env: Envelope = Envelope()) -> tuple[float, float]:
    """Closure rule: ``(t2, t4)`` giving a net ``-2π`` turn that ends at rest."""
    a = max_pitch_acc(params)
    beta = env.beta_frac * a
    shift = beta * (eta.t1 - eta.t5) / a     # t4 - t2, from zero terminal rate

    def angle(t2):
        acc = (-beta, -a, 0.0, a, beta)
        dur = (eta.t1, t2, eta.t3, t2 + shift, eta.t5)
        return _net_angle(acc, dur)[0] + 2.0 * math.pi

    lo = max(0.0, -shift)
    hi = lo + 1.0
    while angle(hi) > 0:
        hi *= 2.0
    if angle(lo) <= 0:
        # phases 1/5 alone already over-rotate; only possible for extreme envelopes
        raise InfeasibleScheduleError(2, "no non-negative rotation time closes the flip")
    t2 = brentq(angle, lo, hi, xtol=1e-15, rtol=1e-15)
    return t2, t2 + shift


def expand_schedule(eta: PrimitiveParams | Sequence[float], params: VehicleParams = VehicleParams(),
                    env: Envelope = Envelope(), check_bounds: bool = True) -> PhaseSchedule:
    """Map ``η`` to the five constant-input phases."""
    if not isinstance(eta, PrimitiveParams):
        eta = PrimitiveParams.from_vector(eta)
    if check_bounds:
        box = env.bounds(params)
        v = eta.as_vector()
        if np.any(v < box.lower - 1e-12) or np.any(v > box.upper + 1e-12):
            raise ValueError(f"η={v.tolist()} outside bounds")
    a = max_pitch_acc(params)
    beta = env.beta_frac * a
    t2, t4 = rotation_durations(eta, params, env)
    # bang-bang rotation: one pair at t_max, the other off
    u_rot = 2.0 * params.t_max / params.mass
    phases = (
        _phase(1, eta.t1, eta.U1, -beta, params),
        _phase(2, t2, u_rot, -a, params),
        _phase(3, eta.t3, env.u_coast, 0.0, params),
        _phase(4, t4, u_rot, a, params),
        _phase(5, eta.t5, eta.U5, beta, params),
    )
    return PhaseSchedule(phases)


def schedule_to_rotor_thrusts(s: PhaseSchedule, t: float) -> np.ndarray:
    return s.phases[s.phase_index(t)].thrusts


def schedule_to_input(s: PhaseSchedule, t: float, params: VehicleParams) -> ControlInput:
    return mix(schedule_to_rotor_thrusts(s, t), params)


# ---------------------------------------------------------------------------
# Simulation of a schedule
# ---------------------------------------------------------------------------

def _substeps(duration: float, h: float) -> tuple[int, float]:
    n = max(1, int(math.ceil(duration / h - 1e-9)))
    return n, duration / n


def simulate_planar(s: PhaseSchedule, params: VehicleParams = VehicleParams(), h: float = 1e-3,
                    xp0=None) -> tuple[np.ndarray, np.ndarray]:
    """Open-loop planar rollout. Each phase is split into equal steps no longer than ``h``."""
    xp = np.zeros(6) if xp0 is None else np.asarray(xp0, dtype=float)
    ts, xs = [0.0], [xp]
    t = 0.0
    for ph in s.phases:
        if ph.duration <= 0:
            continue
        n, dt = _substeps(ph.duration, h)
        for _ in range(n):
            xp = planar_rk4(xp, ph.thrusts, params, dt)
            t += dt
            ts.append(t)
            xs.append(xp)
    return np.array(ts), np.array(xs)


def simulate_3d(s: PhaseSchedule, params: VehicleParams = VehicleParams(), h: float = 1e-3,
                d: Optional[Disturbance] = None, x0: Optional[RigidState] = None):
    """Open-loop full-model rollout on the same phase-aligned grid as :func:`simulate_planar`."""
    x = RigidState.hover() if x0 is None else x0
    ts, xs, us = [0.0], [x], []
    t = 0.0
    step = 0
    for ph in s.phases:
        if ph.duration <= 0:
            continue
        u = mix(ph.thrusts, params)
        n, dt = _substeps(ph.duration, h)
        for _ in range(n):
            x = rk4_step(x, u, params, d, dt, step=step)
            step += 1
            t += dt
            ts.append(t)
            xs.append(x)
            us.append(u)
    us.append(us[-1])
    return np.array(ts), xs, us


def pitch_unwrapped(states: Sequence[RigidState]) -> np.ndarray:
    """Cumulative pitch angle from the continuity-tracked quaternion (pure pitch motion)."""
    ang = np.array([2.0 * math.atan2(x.q[2], x.q[0]) for x in states])
    return np.unwrap(ang)


def planar_from_3d(states: Sequence[RigidState]) -> np.ndarray:
    """``[x, z, θ, ẋ, ż, θ̇]`` rows extracted from full states."""
    th = pitch_unwrapped(states)
    return np.array([[x.r[0], x.r[2], a, x.v[0], x.v[2], x.w[1]] for x, a in zip(states, th)])


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def final_state_error(eta: PrimitiveParams | Sequence[float], params: VehicleParams = VehicleParams(),
                      env: Envelope = Envelope(), h: float = 1e-3) -> tuple[np.ndarray, float]:
    """``e = [x, z, ẋ, ż, θ + 2π]`` at the end of the open-loop planar rollout, and ``‖e‖``."""
    s = expand_schedule(eta, params, env, check_bounds=False)
    _, xs = simulate_planar(s, params, h)
    x, z, th, xd, zd, _ = xs[-1]
    e = np.array([x, z, xd, zd, th + 2.0 * math.pi])
    return e, float(np.linalg.norm(e))


@dataclass
class FlipOptResult:
    eta: PrimitiveParams
    cost: float
    error: np.ndarray
    archive_X: np.ndarray
    archive_y: np.ndarray
    seed: int

    def to_json(self) -> dict:
        return {
            "eta": asdict(self.eta),
            "eta_vector": self.eta.as_vector().tolist(),
            "cost": self.cost,
            "final_state_error": self.error.tolist(),
            "seed": self.seed,
            "n_evaluations": int(len(self.archive_y)),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def flip_objective(params: VehicleParams = VehicleParams(), env: Envelope = Envelope(), h: float = 1e-3):
    """``f(η) = -‖e(η)‖``. Infeasible schedules give ``nan``, which the optimiser penalises."""
    def f(x):
        try:
            return -final_state_error(x, params, env, h)[1]
        except InfeasibleScheduleError:
            return float("nan")
    return f


def optimize_flip(params: VehicleParams = VehicleParams(), env: Envelope = Envelope(), n_init: int = 250,
                  n_iter: int = 1000, seed: int = 0, archive_path=None, **bo_kwargs) -> FlipOptResult:
    box = env.bounds(params)
    res = bayesopt.optimize(flip_objective(params, env), box, n_init=n_init, n_iter=n_iter, seed=seed,
                            archive_path=archive_path, **bo_kwargs)
    eta = PrimitiveParams.from_vector(res.x_best)
    e, cost = final_state_error(eta, params, env)
    return FlipOptResult(eta, cost, e, res.X, res.y, seed)


def export_schedule_csv(s: PhaseSchedule, params: VehicleParams, path, dt: float = 1e-3) -> None:
    n = int(math.floor(s.total / dt + 1e-9))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "T1", "T2", "T3", "T4", "F", "tauy"])
        for k in range(n + 1):
            t = min(k * dt, s.total)
            T = schedule_to_rotor_thrusts(s, t)
            u = mix(T, params)
            w.writerow([repr(float(t))] + [repr(float(v)) for v in T] + [repr(u.F), repr(float(u.tau[1]))])
