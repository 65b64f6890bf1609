"""Flip reference planning.

1. A logistic attitude profile turns the vehicle once about body y.
2. The translational motion under that attitude is a linear time-varying (LTV)
   double integrator in the collective thrust. It is discretised with a
   zero-order hold and planned by a convex QP that drives the vehicle back to
   its start while respecting a position box and torque-reserved thrust bounds.
3. Natural cubic splines through the planned knots give smooth position,
   velocity and acceleration references.

Everything is computed in NED. The planar box is given in z-up display
coordinates and converted internally.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit

from . import qp
from .control import ReferencePoint
from .rigid import VehicleParams, rotm_from_quat


class PlanningError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class SigmoidAttitudeParams:
    nu_m: float = 35.0
    t_m: float = 0.7

    def __post_init__(self):
        if not (self.nu_m > 0 and self.t_m > 0):
            raise ValueError("nu_m and t_m must be positive")


def attitude_reference(t, p: SigmoidAttitudeParams):
    """``(q_d, ω_d, ω'_d)`` of the flip at time ``t ∈ [0, t_m]`` (scalar or array).

    With ``s = logistic(ν (t - t_m/2))``: ``q0 = 1 - 2s`` runs from +1 to -1,
    ``q2 = 2√(s(1-s))``, ``ω_y = 2ν√(s(1-s))`` and ``ω'_y = ν²(1-2s)√(s(1-s))``.
    The rate expressions are the closed-form limits of the quaternion
    kinematics, so they stay regular where ``q0² → 1``.
    """
    ta = np.asarray(t, dtype=float)
    if np.any(ta < -1e-12) or np.any(ta > p.t_m + 1e-12):
        raise ValueError(f"t outside [0, {p.t_m}]")
    s = expit(p.nu_m * (ta - 0.5 * p.t_m))
    root = np.sqrt(s * (1.0 - s))
    zero = np.zeros_like(s)
    q = np.stack([1.0 - 2.0 * s, zero, 2.0 * root, zero], axis=-1)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w = np.stack([zero, 2.0 * p.nu_m * root, zero], axis=-1)
    dw = np.stack([zero, p.nu_m ** 2 * (1.0 - 2.0 * s) * root, zero], axis=-1)
    return q, w, dw


def pitch_from_quat(q) -> np.ndarray:
    """Pitch on ``[-π, π]`` from ``θ = 2 arccos(q0)`` for pure-pitch quaternions with ``q2 ≥ 0``."""
    q = np.atleast_2d(q)
    th = 2.0 * np.arccos(np.clip(q[:, 0], -1.0, 1.0))
    return np.where(th > math.pi, th - 2.0 * math.pi, th)


def feedforward_torque(w_d: np.ndarray, dw_d: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Torque of the tracking law with zero attitude and rate errors: ``ω_d × Jω_d + J ω'_d``."""
    J = params.J
    w_d = np.atleast_2d(w_d)
    dw_d = np.atleast_2d(dw_d)
    return np.cross(w_d, w_d @ J.T) + dw_d @ J.T


# ---------------------------------------------------------------------------
# LTV model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LtvModel:
    """``ζ_{k+1} = A_d ζ_k + B_k u_k`` with ``ζ = [x, ẋ, z̃, z̃']`` and ``z̃ = z - ½ g t²`` (NED)."""

    Ts: float
    N: int
    Ad: np.ndarray
    B: np.ndarray          # (N, 4)
    g: float

    def propagate(self, u, zeta0=None) -> np.ndarray:
        z = np.zeros(4) if zeta0 is None else np.asarray(zeta0, dtype=float)
        out = [z]
        for k in range(self.N):
            z = self.Ad @ z + self.B[k] * u[k]
            out.append(z)
        return np.array(out)

    def gravity_offset(self, k) -> np.ndarray:
        """``z - z̃`` at step(s) ``k``."""
        return 0.5 * self.g * (np.asarray(k, dtype=float) * self.Ts) ** 2

    def prediction_matrices(self):
        """Dense maps from ``u_0..u_{N-1}`` to ``x_k`` and ``z̃_k`` (k = 1..N), starting at rest."""
        N, Ts = self.N, self.Ts
        k = np.arange(1, N + 1)[:, None]
        j = np.arange(N)[None, :]
        lag = (k - 1 - j) * Ts
        mask = j <= k - 1
        Px = np.where(mask, self.B[None, :, 0] + lag * self.B[None, :, 1], 0.0)
        Pz = np.where(mask, self.B[None, :, 2] + lag * self.B[None, :, 3], 0.0)
        return Px, Pz


def build_ltv(p: SigmoidAttitudeParams, Ts: float, N: Optional[int] = None,
              params: VehicleParams = VehicleParams()) -> LtvModel:
    """Zero-order-hold discretisation along the attitude reference sampled at ``k Ts``."""
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    if N is None:
        N = int(round(p.t_m / Ts))
    if abs(N * Ts - p.t_m) > Ts + 1e-12:
        raise ValueError("N·Ts must match t_m within one step")
    t = np.minimum(np.arange(N) * Ts, p.t_m)
    q, _, _ = attitude_reference(t, p)
    R13 = 2.0 * (q[:, 1] * q[:, 3] + q[:, 0] * q[:, 2])
    R33 = 1.0 - 2.0 * (q[:, 1] ** 2 + q[:, 2] ** 2)
    c = -Ts / params.mass            # thrust acts along -R e3 in NED
    B = c * np.column_stack([0.5 * Ts * R13, R13, 0.5 * Ts * R33, R33])
    Ad = np.array([[1.0, Ts, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, Ts], [0, 0, 0, 1.0]])
    return LtvModel(Ts=Ts, N=N, Ad=Ad, B=B, g=params.g)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanarBox:
    """Admissible x and height ranges (height is z-up, metres). ``None`` disables a bound."""

    x_min: Optional[float] = -0.15
    x_max: Optional[float] = 0.0
    h_min: Optional[float] = 0.0
    h_max: Optional[float] = 0.3

    @classmethod
    def unbounded(cls) -> "PlanarBox":
        return cls(None, None, None, None)


def _b(v, default):
    return default if v is None else v


@dataclass
class PlanResult:
    attitude: SigmoidAttitudeParams
    Ts: float
    N: int
    u: np.ndarray            # thrust u_0..u_{N-1}
    zeta: np.ndarray         # ζ_0..ζ_N
    u_lo: np.ndarray
    u_hi: np.ndarray
    tau: np.ndarray          # feed-forward torques per step
    kkt_residual: float
    iterations: int
    solve_time: float
    terminal_error: float
    max_violation: float
    model: LtvModel = field(repr=False)
    box: PlanarBox = field(default_factory=PlanarBox)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.Ts

    @property
    def positions(self) -> np.ndarray:
        """NED ``(x, z)`` at the knots."""
        z = self.zeta[:, 2] + self.model.gravity_offset(np.arange(self.N + 1))
        return np.column_stack([self.zeta[:, 0], z])

    def stats(self) -> dict:
        return {
            "N": self.N,
            "Ts": self.Ts,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "solve_time_s": self.solve_time,
            "terminal_error_m": self.terminal_error,
            "max_constraint_violation": self.max_violation,
            "terminal_velocity": [float(self.zeta[-1, 1]), float(self.zeta[-1, 3] + self.model.g * self.N * self.Ts)],
        }


def plan_flip(p: SigmoidAttitudeParams = SigmoidAttitudeParams(), box: PlanarBox = PlanarBox(),
              f_max: Optional[float] = None, Ts: float = 2e-3, params: VehicleParams = VehicleParams(),
              tol: float = 1e-10) -> PlanResult:
    """Plan the thrust profile and translational reference for the flip."""
    f_max = params.f_max if f_max is None else f_max
    model = build_ltv(p, Ts, params=params)
    N = model.N
    t = np.minimum(np.arange(N) * Ts, p.t_m)
    _, w, dw = attitude_reference(t, p)
    tau = feedforward_torque(w, dw, params)
    reserve = np.linalg.norm(tau, axis=1) / params.l
    u_lo = reserve
    u_hi = f_max - reserve
    if np.any(u_lo > u_hi):
        k = int(np.argmax(u_lo - u_hi))
        raise PlanningError("thrust bounds are empty: torque reserve exceeds F_max/2", k)

    Px, Pz = model.prediction_matrices()
    zd = -model.gravity_offset(N)           # z̃ target so that z_N = 0
    px, pz = Px[-1], Pz[-1]
    H = 2.0 * (np.outer(px, px) + np.outer(pz, pz))
    g = -2.0 * zd * pz

    rows, lo, hi = [np.eye(N)], [u_lo], [u_hi]
    inf = np.inf
    if box.x_min is not None or box.x_max is not None:
        rows.append(Px)
        lo.append(np.full(N, _b(box.x_min, -inf)))
        hi.append(np.full(N, _b(box.x_max, inf)))
    if box.h_min is not None or box.h_max is not None:
        off = model.gravity_offset(np.arange(1, N + 1))
        rows.append(Pz)
        # height h = -z, z = z̃ + off
        lo.append(-_b(box.h_max, inf) - off)
        hi.append(-_b(box.h_min, -inf) - off)
    prob = qp.QpProblem(H=H, g=g, C=np.vstack(rows), lo=np.concatenate(lo), hi=np.concatenate(hi))
    t0 = time.perf_counter()
    try:
        res = qp.solve_qp(prob, tol=tol)
    except qp.QpInfeasibleError as exc:
        k = exc.row % N
        raise PlanningError(f"flip plan infeasible ({exc})", k) from exc
    elapsed = time.perf_counter() - t0
    u = res.u
    zeta = model.propagate(u)
    term = float(math.hypot(zeta[-1, 0], zeta[-1, 2] - zd))
    return PlanResult(attitude=p, Ts=Ts, N=N, u=u, zeta=zeta, u_lo=u_lo, u_hi=u_hi, tau=tau,
                      kkt_residual=res.kkt_residual, iterations=res.iterations, solve_time=elapsed,
                      terminal_error=term, max_violation=float(np.max(prob.violation(u), initial=0.0)),
                      model=model, box=box)


# ---------------------------------------------------------------------------
# Splines and the tracked reference
# ---------------------------------------------------------------------------

def fit_cubic_spline(t, values, v0=None) -> CubicSpline:
    """Cubic spline through ``(t_i, values_i)``; values may be vector-valued along axis 0.

    Both ends are natural unless ``v0`` is given, which clamps the first derivative at the start.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or len(t) < 3:
        raise ValueError("need at least three knots")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing (no duplicates)")
    y = np.asarray(values, dtype=float)
    start = (2, np.zeros(y.shape[1:])) if v0 is None else (1, np.broadcast_to(np.asarray(v0, dtype=float), y.shape[1:]))
    return CubicSpline(t, y, bc_type=(start, (2, np.zeros(y.shape[1:]))))


def quintic_blend(p0, v0, a0, T: float):
    """Per-axis quintic from ``(p0, v0, a0)`` at 0 to rest at the origin at ``T``.

    Returns a function ``τ -> (p, v, a)``.
    """
    p0, v0, a0 = (np.asarray(a, dtype=float) for a in (p0, v0, a0))
    M = np.array([[T ** 3, T ** 4, T ** 5], [3 * T ** 2, 4 * T ** 3, 5 * T ** 4], [6 * T, 12 * T ** 2, 20 * T ** 3]])
    rhs = -np.vstack([p0 + v0 * T + 0.5 * a0 * T ** 2, v0 + a0 * T, a0])
    c345 = np.linalg.solve(M, rhs)

    def f(tau: float):
        tau = min(max(tau, 0.0), T)
        c3, c4, c5 = c345
        p = p0 + v0 * tau + 0.5 * a0 * tau ** 2 + c3 * tau ** 3 + c4 * tau ** 4 + c5 * tau ** 5
        v = v0 + a0 * tau + 3 * c3 * tau ** 2 + 4 * c4 * tau ** 3 + 5 * c5 * tau ** 4
        a = a0 + 6 * c3 * tau + 12 * c4 * tau ** 2 + 20 * c5 * tau ** 3
        return p, v, a

    return f


class FlipReference:
    """Hover, planned flip, recovery, hover.

    The planned segment occupies ``[t_pre, t_pre + t_m]``. The planned motion ends
    with a non-zero velocity, because the terminal cost weighs position only. A
    quintic recovery segment of length ``t_rec`` therefore brings the reference
    back to rest at the origin. Outside the flip the reference is position-only,
    with the desired attitude derived from the commanded force.
    """

    def __init__(self, plan: PlanResult, t_pre: float = 0.5, t_post: float = 1.5, t_rec: float = 1.0):
        if t_rec > t_post:
            raise ValueError("t_rec must not exceed t_post")
        self.plan = plan
        self.t_pre = float(t_pre)
        self.t_post = float(t_post)
        self.t_rec = float(t_rec)
        self.t_m = plan.attitude.t_m
        pos = plan.positions
        knots = np.column_stack([pos[:, 0], np.zeros(len(pos)), pos[:, 1]])
        # the plan starts from rest, so the spline does too
        self._spline = fit_cubic_spline(plan.t, knots, v0=np.zeros(3))
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        tm = self.t_m
        self._recovery = quintic_blend(self._spline(tm), self._d1(tm), self._d2(tm), self.t_rec) if t_rec > 0 else None

    @property
    def duration(self) -> float:
        return self.t_pre + self.t_m + self.t_post

    @property
    def flip_window(self) -> tuple[float, float]:
        return self.t_pre, self.t_pre + self.t_m

    def __call__(self, t: float) -> ReferencePoint:
        tau = t - self.t_pre
        if tau < 0:
            return ReferencePoint()
        if tau > self.t_m:
            if self._recovery is None:
                return ReferencePoint()
            p, v, a = self._recovery(tau - self.t_m)
            return ReferencePoint(r_d=p, v_d=v, a_d=a)
        q, w, dw = attitude_reference(tau, self.plan.attitude)
        return ReferencePoint(r_d=self._spline(tau), v_d=self._d1(tau), a_d=self._d2(tau),
                              R_d=rotm_from_quat(q), w_d=w, dw_d=dw)

    def quaternion(self, t: float) -> np.ndarray:
        tau = t - self.t_pre
        if tau < 0 or tau > self.t_m:
            return np.array([1.0, 0.0, 0.0, 0.0])
        return attitude_reference(tau, self.plan.attitude)[0]

    COLUMNS = ("t", "q0", "q1", "q2", "q3", "wx", "wy", "wz", "dwx", "dwy", "dwz",
               "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az")

    def sample(self, dt: float = 1e-3) -> np.ndarray:
        n = int(round(self.duration / dt))
        rows = []
        for i in range(n + 1):
            t = i * dt
            ref = self(t)
            rows.append(np.concatenate([[t], self.quaternion(t), ref.w_d, ref.dw_d, ref.r_d, ref.v_d, ref.a_d]))
        return np.array(rows)

    def to_csv(self, path, dt: float = 1e-3, z_up: bool = False) -> None:
        data = self.sample(dt)
        if z_up:
            data[:, [3, 4, 6, 7, 9, 10, 12, 13, 15, 16, 18, 19]] *= -1.0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in data:
                w.writerow([repr(float(v)) for v in row])

    def metadata(self) -> dict:
        return {
            "attitude": asdict(self.plan.attitude),
            "box_z_up": asdict(self.plan.box),
            "t_pre": self.t_pre,
            "t_post": self.t_post,
            "t_rec": self.t_rec,
            "qp": self.plan.stats(),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
