"""Quadcopter dynamics, fixed-step RK4 integration and rollouts.

The full model is

    m r'' = m g e3 - F R e3 + Δr(x)
    R'    = R hat(ω)
    J ω'  = τ - ω × Jω + ΔR(x)

with an optional state-dependent disturbance ``(Δr, ΔR)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rigid import (
    E3,
    ControlInput,
    RigidState,
    VehicleParams,
    _pick_sign,
    _quat_from_rotm,
    project_so3,
)

Disturbance = Callable[[RigidState], tuple[np.ndarray, np.ndarray]]
Controller = Callable[[float, RigidState], ControlInput]


class IntegrationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class EscapeError(IntegrationError):
    pass


# ---------------------------------------------------------------------------
# Disturbances
# ---------------------------------------------------------------------------

def no_disturbance(x: RigidState):
    return np.zeros(3), np.zeros(3)


@dataclass(frozen=True)
class RollPitchDisturbance:
    """Torque ``amplitude * sin(φ/2 + θ/2)`` on the body axes.

    For zero yaw, ``sin(φ/2 + θ/2) = q1 + q2`` exactly, so the continuous
    quaternion mirror of the state is used. This keeps the disturbance smooth
    through the inverted attitude of a flip.
    """

    amplitude: tuple[float, float, float] = (-0.007, -0.007, 0.0)

    def __call__(self, x: RigidState):
        s = x.q[1] + x.q[2]
        return np.zeros(3), np.asarray(self.amplitude) * s


def sup_norm(d: Disturbance, states) -> float:
    """Largest disturbance magnitude over a sample of states."""
    return max(max(np.linalg.norm(a), np.linalg.norm(b)) for a, b in map(d, states))


# ---------------------------------------------------------------------------
# Continuous dynamics
# ---------------------------------------------------------------------------

def deriv(x: RigidState, u: ControlInput, params: VehicleParams, d: Optional[Disturbance] = None):
    """Time derivative ``(r', v', R', ω')`` of the full model."""
    dr, dR = (np.zeros(3), np.zeros(3)) if d is None else d(x)
    J = params.J
    acc = params.g * E3 - (u.F / params.mass) * (x.R @ E3) + dr / params.mass
    Rdot = x.R @ np.array([[0.0, -x.w[2], x.w[1]], [x.w[2], 0.0, -x.w[0]], [-x.w[1], x.w[0], 0.0]])
    wdot = np.linalg.solve(J, u.tau - np.cross(x.w, J @ x.w) + dR)
    return x.v.copy(), acc, Rdot, wdot


def _stage(x: RigidState, k, a: float) -> RigidState:
    R = x.R + a * k[2]
    q = _pick_sign(_quat_from_rotm(R), x.q)
    return RigidState(r=x.r + a * k[0], v=x.v + a * k[1], R=R, q=q, w=x.w + a * k[3])


def rk4_step(x: RigidState, u: ControlInput, params: VehicleParams, d: Optional[Disturbance], h: float,
             step: int | None = None) -> RigidState:
    """One classical RK4 step with ``u`` held constant, followed by SO(3) re-projection."""
    if not (0.0 < h <= 0.01):
        raise ValueError(f"step size must lie in (0, 0.01], got {h}")
    k1 = deriv(x, u, params, d)
    k2 = deriv(_stage(x, k1, h / 2), u, params, d)
    k3 = deriv(_stage(x, k2, h / 2), u, params, d)
    k4 = deriv(_stage(x, k3, h), u, params, d)
    inc = [(a + 2 * b + 2 * c + e) * (h / 6.0) for a, b, c, e in zip(k1, k2, k3, k4)]
    r = x.r + inc[0]
    v = x.v + inc[1]
    R = project_so3(x.R + inc[2])
    w = x.w + inc[3]
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v)) and np.all(np.isfinite(R)) and np.all(np.isfinite(w))):
        raise IntegrationError("non-finite state", step)
    q = _pick_sign(_quat_from_rotm(R), x.q)
    return RigidState(r=r, v=v, R=R, q=q, w=w)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass
class SimLog:
    t: np.ndarray
    states: list
    inputs: list
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.t) == len(self.states) == len(self.inputs)):
            raise ValueError("SimLog lengths are inconsistent")

    def array(self) -> np.ndarray:
        """Columns ``t, x, y, z, vx, vy, vz, q0..q3, wx, wy, wz, F, taux, tauy, tauz``."""
        rows = [
            np.concatenate([[t], s.r, s.v, s.q, s.w, [u.F], u.tau])
            for t, s, u in zip(self.t, self.states, self.inputs)
        ]
        return np.array(rows)

    COLUMNS = ("t", "x", "y", "z", "vx", "vy", "vz", "q0", "q1", "q2", "q3",
               "wx", "wy", "wz", "F", "taux", "tauy", "tauz")

    def to_csv(self, path, z_up: bool = False) -> None:
        data = self.array()
        if z_up:
            # world and body frames both rotated by π about x (NED/FRD -> z-up/FLU)
            data[:, [2, 3, 5, 6, 9, 10, 12, 13, 16, 17]] *= -1.0
        names = list(self.COLUMNS)
        extra = sorted(self.diagnostics)
        cols = [data] + [np.asarray(self.diagnostics[k], dtype=float).reshape(len(self.t), -1) for k in extra]
        for k in extra:
            arr = np.asarray(self.diagnostics[k])
            if arr.ndim == 1:
                names.append(k)
            else:
                names.extend(f"{k}{i}" for i in range(arr.shape[1]))
        table = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in table:
                w.writerow([repr(float(v)) for v in row])


def rollout(x0: RigidState, controller: Controller, params: VehicleParams, d: Optional[Disturbance] = None,
            T: float = 1.0, h: float = 1e-3, escape_radius: float = 100.0,
            observer: Callable | None = None) -> SimLog:
    """Simulate ``T`` seconds, calling ``controller(t, x)`` at every step (input held over the step).

    ``observer(t, x, u)`` may return a dict of per-step diagnostics that are
    collected into :attr:`SimLog.diagnostics`.
    """
    n = int(round(T / h))
    if abs(n * h - T) > 1e-9 * max(1.0, T):
        raise ValueError("duration must be an integer multiple of the step")
    ts = np.arange(n + 1) * h
    states = [x0]
    inputs = []
    diag: dict = {}
    x = x0
    for i in range(n + 1):
        t = float(ts[i])
        u = controller(t, x)
        inputs.append(u)
        if observer is not None:
            for k, v in observer(t, x, u).items():
                diag.setdefault(k, []).append(v)
        if i == n:
            break
        x = rk4_step(x, u, params, d, h, step=i)
        if np.linalg.norm(x.r) > escape_radius:
            raise EscapeError(f"vehicle left the {escape_radius} m escape radius", i)
        states.append(x)
    return SimLog(t=ts, states=states, inputs=inputs, diagnostics={k: np.array(v) for k, v in diag.items()})


class ZeroOrderHold:
    """Evaluate ``controller`` every ``period`` seconds and hold its output in between."""

    def __init__(self, controller: Controller, period: float):
        self.controller = controller
        self.period = period
        self._next = -math.inf
        self._u: ControlInput | None = None
        self.updates = 0

    def __call__(self, t: float, x: RigidState) -> ControlInput:
        if t >= self._next - 1e-12:
            self._u = self.controller(t, x)
            k = math.floor(t / self.period + 1e-9)
            self._next = (k + 1) * self.period
            self.updates += 1
        return self._u


# ---------------------------------------------------------------------------
# Planar model
# ---------------------------------------------------------------------------

def planar_deriv(xp, thrusts, params: VehicleParams) -> np.ndarray:
    """Derivative of ``[x, z, θ, ẋ, ż, θ̇]`` in the x–z plane (NED, pitch about body y)."""
    x, z, th, xd, zd, thd = xp
    T1, T2, T3, T4 = thrusts
    total = T1 + T2 + T3 + T4
    m = params.mass
    return np.array([
        xd,
        zd,
        thd,
        -total * math.sin(th) / m,
        -total * math.cos(th) / m + params.g,
        params.l * (T1 + T4 - T2 - T3) / params.jyy,
    ])


def planar_rk4(xp, thrusts, params: VehicleParams, h: float) -> np.ndarray:
    xp = np.asarray(xp, dtype=float)
    k1 = planar_deriv(xp, thrusts, params)
    k2 = planar_deriv(xp + 0.5 * h * k1, thrusts, params)
    k3 = planar_deriv(xp + 0.5 * h * k2, thrusts, params)
    k4 = planar_deriv(xp + h * k3, thrusts, params)
    return xp + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def kinetic_energy(x: RigidState, params: VehicleParams) -> float:
    return 0.5 * params.mass * float(x.v @ x.v) + 0.5 * float(x.w @ params.J @ x.w)
