"""Geometric tracking on SE(3) with optional GP compensation and robust terms.

Force and torque commands:

    A = -k_r e_r - k_v e_v - m g e3 + m r''_d - η_r + μ_r
    F = -Aᵀ R e3
    τ = -k_R e_R - k_ω e_ω + ω × Jω - J(ω^ Rᵀ R_d ω_d - Rᵀ R_d ω'_d) - η_R + μ_R

``η`` are GP posterior means and ``μ`` are saturation-shaped robust terms sized by
the GP uncertainty bound ``δ``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import gp
from .rigid import E3, ControlInput, RigidState, VehicleParams, _vee_unchecked, saturate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeomGains:
    k_r: float = 4.5
    k_v: float = 0.3
    k_R: float = 0.2
    k_w: float = 0.002
    c1: float = 1.0
    c2: float = 0.1
    eps_r: float = 4e-4
    eps_R: float = 4e-4
    tau_exp: float = 3.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"GeomGains.{name} must be positive, got {v!r}")
        if self.tau_exp <= 2:
            raise ValueError("tau_exp must exceed 2")


@dataclass(frozen=True)
class ReferencePoint:
    """Desired state at one instant.

    ``R_d = None`` selects position-only tracking: the desired attitude is built
    from the commanded force direction with a fixed heading, and ``ω_d = ω'_d = 0``.
    """

    r_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R_d: Optional[np.ndarray] = None
    w_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dw_d: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def hover(cls, r=(0.0, 0.0, 0.0)) -> "ReferencePoint":
        return cls(r_d=np.asarray(r, dtype=float), R_d=np.eye(3))


Reference = Callable[[float], ReferencePoint]


# ---------------------------------------------------------------------------
# Error terms
# ---------------------------------------------------------------------------

def tracking_errors(x: RigidState, ref: ReferencePoint, R_d: Optional[np.ndarray] = None):
    """``(e_r, e_v, e_R, e_ω)``; ``R_d`` overrides ``ref.R_d`` when given."""
    Rd = ref.R_d if R_d is None else R_d
    e_r = x.r - ref.r_d
    e_v = x.v - ref.v_d
    M = Rd.T @ x.R
    e_R = 0.5 * _vee_unchecked(M - M.T)
    e_w = x.w - x.R.T @ Rd @ ref.w_d
    return e_r, e_v, e_R, e_w


def attitude_error_psi(R, R_d) -> float:
    return float(0.5 * np.trace(np.eye(3) - np.asarray(R_d).T @ np.asarray(R)))


def desired_attitude_from_force(A: np.ndarray, heading=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Rotation whose body z axis points along ``-A`` with body x as close as possible to ``heading``."""
    nA = np.linalg.norm(A)
    b3 = -A / nA if nA > 1e-9 else E3.copy()
    b1c = np.asarray(heading, dtype=float)
    b2 = np.cross(b3, b1c)
    if np.linalg.norm(b2) < 1e-9:
        b2 = np.cross(b3, np.array([0.0, 1.0, 0.0]))
    b2 /= np.linalg.norm(b2)
    b1 = np.cross(b2, b3)
    return np.column_stack([b1, b2, b3])


def robust_terms(e_r, e_v, e_R, e_w, gains: GeomGains, params: VehicleParams, delta_r: float, delta_R: float):
    """``(μ_r, μ_R)``. Both vanish when the corresponding ``δ`` is zero."""
    if delta_r < 0 or delta_R < 0:
        raise ValueError("uncertainty bounds must be non-negative")
    tau = gains.tau_exp
    e_B = e_B_vector(e_r, e_v, gains, params)
    nB = np.linalg.norm(e_B)
    mu_r = -(delta_r ** (tau + 2)) * e_B * nB ** tau / (delta_r ** (tau + 1) * nB ** (tau + 1) + gains.eps_r ** (tau + 1))
    e_A = e_A_vector(e_R, e_w, gains, params)
    mu_R = -(delta_R ** 2) * e_A / (delta_R * np.linalg.norm(e_A) + gains.eps_R)
    return mu_r, mu_R


def e_A_vector(e_R, e_w, gains: GeomGains, params: VehicleParams) -> np.ndarray:
    return np.asarray(e_w) + gains.c2 * np.linalg.solve(params.J, e_R)


def e_B_vector(e_r, e_v, gains: GeomGains, params: VehicleParams) -> np.ndarray:
    return np.asarray(e_v) + (gains.c1 / params.mass) * np.asarray(e_r)


# ---------------------------------------------------------------------------
# GP compensation
# ---------------------------------------------------------------------------

def adaptive_inputs(x: RigidState) -> np.ndarray:
    """GP input ``(q1, q2, ωx, ωy)``."""
    return np.array([x.q[1], x.q[2], x.w[0], x.w[1]])


@dataclass
class AdaptiveModel:
    """Two scalar GP lookup tables for the roll and pitch residual torques.

    ``aggregation`` selects how the two per-output standard deviations are
    combined: ``"euclidean"`` (default, conservative) or ``"max"``.
    """

    table_x: gp.LookupTable
    table_y: gp.LookupTable
    aggregation: str = "euclidean"
    delta_r: float = 0.0
    clamp_count: int = 0

    def __post_init__(self):
        if self.aggregation not in ("euclidean", "max"):
            raise ValueError("aggregation must be 'euclidean' or 'max'")
        nodes = _grid_nodes(self.table_x.grids)
        if [len(g) for g in self.table_x.grids] != [len(g) for g in self.table_y.grids]:
            raise ValueError("tables must share a grid")
        self.delta_R = float(np.max(2.0 * self._combine(self.table_x.std.ravel(), self.table_y.std.ravel())))
        self._n_nodes = len(nodes)

    def _combine(self, sx, sy):
        return np.hypot(sx, sy) if self.aggregation == "euclidean" else np.maximum(sx, sy)

    def evaluate(self, z: np.ndarray):
        """Means, per-point ``δ̂ = 2σ`` and a clamp mask for a batch of GP inputs."""
        mx, sx, cx = gp.table_eval(self.table_x, z, return_clamped=True)
        my, sy, _ = gp.table_eval(self.table_y, z, return_clamped=True)
        return np.asarray(mx), np.asarray(my), 2.0 * self._combine(np.asarray(sx), np.asarray(sy)), cx

    @classmethod
    def load(cls, path_x, path_y, **kw) -> "AdaptiveModel":
        return cls(gp.LookupTable.load(path_x), gp.LookupTable.load(path_y), **kw)


def _grid_nodes(grids):
    mesh = np.meshgrid(*grids, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def adaptive_terms(model: AdaptiveModel, x: RigidState) -> tuple[np.ndarray, float]:
    """``(η_R, δ̂_R)`` at the state; out-of-grid queries clamp and bump ``model.clamp_count``."""
    mx, my, dh, clamped = model.evaluate(adaptive_inputs(x))
    if np.any(clamped):
        model.clamp_count += 1
    return np.array([float(mx), float(my), 0.0]), float(dh)


# ---------------------------------------------------------------------------
# Control law
# ---------------------------------------------------------------------------

@dataclass
class ControlOutput:
    u: ControlInput
    raw: ControlInput
    saturated: bool
    R_d: np.ndarray
    errors: tuple
    eta_R: np.ndarray
    mu_R: np.ndarray


def control_law(x: RigidState, ref: ReferencePoint, gains: GeomGains, params: VehicleParams,
                adaptive: Optional[AdaptiveModel] = None, robust: bool = False,
                delta_r: Optional[float] = None, delta_R: Optional[float] = None,
                apply_saturation: bool = True) -> ControlOutput:
    m = params.mass
    J = params.J
    e_r = x.r - ref.r_d
    e_v = x.v - ref.v_d
    eta_r = np.zeros(3)
    eta_R = np.zeros(3)
    if adaptive is not None:
        eta_R, _ = adaptive_terms(adaptive, x)
    d_r = (adaptive.delta_r if adaptive is not None else 0.0) if delta_r is None else delta_r
    d_R = (adaptive.delta_R if adaptive is not None else 0.0) if delta_R is None else delta_R

    mu_r = np.zeros(3)
    if robust:
        mu_r, _ = robust_terms(e_r, e_v, np.zeros(3), np.zeros(3), gains, params, d_r, 0.0)
    A = -gains.k_r * e_r - gains.k_v * e_v - m * params.g * E3 + m * ref.a_d - eta_r + mu_r
    if ref.R_d is None:
        Rd = desired_attitude_from_force(A)
        ref = ReferencePoint(ref.r_d, ref.v_d, ref.a_d, Rd, np.zeros(3), np.zeros(3))
    else:
        Rd = ref.R_d
    _, _, e_R, e_w = tracking_errors(x, ref)
    F = -float(A @ (x.R @ E3))

    mu_R = np.zeros(3)
    if robust:
        _, mu_R = robust_terms(e_r, e_v, e_R, e_w, gains, params, 0.0, d_R)
    w = x.w
    RtRd = x.R.T @ Rd
    tau = (-gains.k_R * e_R - gains.k_w * e_w + np.cross(w, J @ w)
           - J @ (np.cross(w, RtRd @ ref.w_d) - RtRd @ ref.dw_d) - eta_R + mu_R)
    raw = ControlInput(F=F, tau=tau)
    if apply_saturation:
        u, sat = saturate(raw, params)
    else:
        u, sat = ControlInput(F=max(F, 0.0), tau=tau), F < 0
    return ControlOutput(u=u, raw=raw, saturated=sat, R_d=Rd, errors=(e_r, e_v, e_R, e_w), eta_R=eta_R, mu_R=mu_R)


# ---------------------------------------------------------------------------
# Lyapunov quantities
# ---------------------------------------------------------------------------

def lyapunov_diagnostics(x: RigidState, ref: ReferencePoint, gains: GeomGains, params: VehicleParams) -> dict:
    """``V1``, ``V2``, ``Ψ`` and the error vectors for a state/reference pair with ``R_d`` set."""
    e_r, e_v, e_R, e_w = tracking_errors(x, ref)
    psi = attitude_error_psi(x.R, ref.R_d)
    V1 = 0.5 * gains.k_r * e_r @ e_r + 0.5 * params.mass * e_v @ e_v + gains.c1 * e_r @ e_v
    V2 = 0.5 * e_w @ params.J @ e_w + gains.k_R * psi + gains.c2 * e_R @ e_w
    return {"V1": float(V1), "V2": float(V2), "psi": psi, "e_r": e_r, "e_v": e_v, "e_R": e_R, "e_w": e_w}


def w2_matrix(gains: GeomGains, params: VehicleParams) -> np.ndarray:
    lam = np.linalg.eigvalsh(params.J)
    lm, lM = lam[0], lam[-1]
    off = -gains.c2 * gains.k_w / (2.0 * lm)
    return np.array([[gains.c2 * gains.k_R / lM, off], [off, gains.k_w - gains.c2]])


def v2_rate(x: RigidState, ref: ReferencePoint, w_dot: np.ndarray, gains: GeomGains, params: VehicleParams) -> float:
    """Exact ``dV2/dt`` for a given body angular acceleration ``w_dot``.

    Uses ``d/dt(R_dᵀR) = R_dᵀR hat(e_ω)``, ``Ψ' = e_Rᵀe_ω`` and
    ``e_R' = ½(tr(RᵀR_d) I - RᵀR_d) e_ω``.
    """
    _, _, e_R, e_w = tracking_errors(x, ref)
    RtRd = x.R.T @ ref.R_d
    e_w_dot = w_dot + np.cross(x.w, RtRd @ ref.w_d) - RtRd @ ref.dw_d
    e_R_dot = 0.5 * (np.trace(RtRd) * np.eye(3) - RtRd) @ e_w
    J = params.J
    return float(e_w @ J @ e_w_dot + gains.k_R * e_R @ e_w + gains.c2 * (e_R_dot @ e_w + e_R @ e_w_dot))


def v2_bound(x: RigidState, ref: ReferencePoint, gains: GeomGains, params: VehicleParams, leak: float) -> float:
    """``-z2ᵀ W2 z2 + leak`` where ``leak`` bounds ``e_Aᵀ(Δ_R - η_R + μ_R)``."""
    _, _, e_R, e_w = tracking_errors(x, ref)
    z = np.array([np.linalg.norm(e_R), np.linalg.norm(e_w)])
    return float(-z @ w2_matrix(gains, params) @ z + leak)


# ---------------------------------------------------------------------------
# Controller object
# ---------------------------------------------------------------------------

class GeometricController:
    """Callable ``(t, x) -> ControlInput`` tracking ``reference(t)``.

    ``mode`` is ``"nominal"``, ``"adaptive"`` (GP mean only) or ``"robust"``
    (GP mean plus robust terms).
    """

    def __init__(self, params: VehicleParams, reference: Reference, gains: GeomGains = GeomGains(),
                 mode: str = "nominal", adaptive: Optional[AdaptiveModel] = None, apply_saturation: bool = True):
        if mode not in ("nominal", "adaptive", "robust"):
            raise ValueError(f"unknown controller mode {mode!r}")
        if mode != "nominal" and adaptive is None:
            raise ValueError(f"mode {mode!r} needs an adaptive model")
        self.params = params
        self.reference = reference
        self.gains = gains
        self.mode = mode
        self.adaptive = adaptive if mode != "nominal" else None
        self.apply_saturation = apply_saturation
        self.saturation_count = 0
        self.last: Optional[ControlOutput] = None
        self._warned_psi = False

    def __call__(self, t: float, x: RigidState) -> ControlInput:
        ref = self.reference(t)
        out = control_law(x, ref, self.gains, self.params, adaptive=self.adaptive,
                          robust=self.mode == "robust", apply_saturation=self.apply_saturation)
        if out.saturated:
            self.saturation_count += 1
        self.last = out
        return out.u

    def observer(self, t: float, x: RigidState, u: ControlInput) -> dict:
        """Per-step diagnostics logged by :func:`quadflip.sim.rollout`."""
        ref = self.reference(t)
        if ref.R_d is None:
            Rd = self.last.R_d if self.last is not None else np.eye(3)
            ref = ReferencePoint(ref.r_d, ref.v_d, ref.a_d, Rd, np.zeros(3), np.zeros(3))
        dg = lyapunov_diagnostics(x, ref, self.gains, self.params)
        if dg["psi"] >= 1.0 and not self._warned_psi:
            log.warning("attitude error Ψ=%.3f reached 1 at t=%.3f s; e_R loses meaning near Ψ=2", dg["psi"], t)
            self._warned_psi = True
        return {"psi": dg["psi"], "v1": dg["V1"], "v2": dg["V2"], "er": dg["e_r"], "eR": dg["e_R"]}
