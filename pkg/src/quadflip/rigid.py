"""Shared rigid-body vocabulary: SO(3) helpers, quaternions, vehicle constants, motor mixing.

Conventions
-----------
* Inertial frame is North-East-Down; ``e3`` points down.
* Quaternions are scalar-first ``[q0, q1, q2, q3]`` (Hamilton product).
* ``R`` maps body coordinates to the (inertial-aligned) vehicle frame.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

E3 = np.array([0.0, 0.0, 1.0])


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


# ---------------------------------------------------------------------------
# Vehicle parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of a '×'-configuration quadcopter (Crazyflie 2.1 defaults).

    ``arm_length`` is the prop-to-prop length. The moment arm used by the mixer and
    the planner is its per-axis projection ``arm_length / 2 * cos(45°)``, exposed
    as :attr:`l`. :attr:`half_arm` (centre to propeller) is kept for consumers that
    need the unprojected distance.
    """

    mass: float = 0.028
    arm_length: float = 0.092
    jxx: float = 1.4e-5
    jyy: float = 1.4e-5
    jzz: float = 2.17e-5
    thrust_coeff: float = 2.88e-8
    drag_coeff: float = 7.24e-10
    t_max: float = 0.16
    g: float = 9.81

    def __post_init__(self):
        for name in ("mass", "arm_length", "jxx", "jyy", "jzz", "thrust_coeff", "drag_coeff", "t_max"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ContractError(f"VehicleParams.{name} must be strictly positive, got {v!r}")
        if self.g < 0:
            raise ContractError("VehicleParams.g must be non-negative")

    @property
    def l(self) -> float:
        return 0.5 * self.arm_length / math.sqrt(2.0)

    @property
    def half_arm(self) -> float:
        return 0.5 * self.arm_length

    @property
    def f_max(self) -> float:
        return 4.0 * self.t_max

    @property
    def J(self) -> np.ndarray:
        return np.diag([self.jxx, self.jyy, self.jzz])

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g

    def with_(self, **changes) -> "VehicleParams":
        return replace(self, **changes)

    @classmethod
    def from_file(cls, path: str | Path) -> "VehicleParams":
        """Load from a flat ``key = value`` file (an optional ``[vehicle]`` section is accepted)."""
        text = Path(path).read_text()
        cp = configparser.ConfigParser()
        if not text.lstrip().startswith("["):
            text = "[vehicle]\n" + text
        cp.read_string(text)
        sec = cp["vehicle"] if cp.has_section("vehicle") else cp[cp.sections()[0]]
        return cls.from_mapping(sec)

    @classmethod
    def from_mapping(cls, mapping) -> "VehicleParams":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise ContractError(f"unknown vehicle key {key!r}")
            kwargs[key] = float(value)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# hat / vee
# ---------------------------------------------------------------------------

def hat(v) -> np.ndarray:
    """Skew matrix with ``hat(v) @ w == cross(v, w)``."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M, tol: float = 1e-9) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise ContractError(f"vee expects a 3x3 matrix, got shape {M.shape}")
    if np.max(np.abs(M + M.T)) >= tol:
        raise ContractError("vee called on a matrix that is not skew-symmetric")
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def _vee_unchecked(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_mul(p, q) -> np.ndarray:
    p0, p1, p2, p3 = p
    q0, q1, q2, q3 = q
    return np.array([
        p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3,
        p0 * q1 + p1 * q0 + p2 * q3 - p3 * q2,
        p0 * q2 - p1 * q3 + p2 * q0 + p3 * q1,
        p0 * q3 + p1 * q2 - p2 * q1 + p3 * q0,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate ``v`` by the sandwich product ``q ⊗ [0, v] ⊗ q*``."""
    return quat_mul(quat_mul(q, np.r_[0.0, v]), quat_conj(q))[1:]


def rotm_from_quat(q, tol: float = 1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > tol:
        raise ContractError(f"quaternion is not unit norm (|q| = {n})")
    return _rotm_from_quat(q / n)


def _rotm_from_quat(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _quat_from_rotm(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest of (trace, diagonal entries).
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    d = (tr, R[0, 0], R[1, 1], R[2, 2])
    i = int(np.argmax(d))
    if i == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_from_rotm(R, prev=None, tol: float = 1e-6) -> np.ndarray:
    """Unit quaternion of a rotation matrix.

    Sign is chosen with ``q0 >= 0`` unless ``prev`` is given, in which case the
    representative closest to ``prev`` is returned (continuity across ``q0 = 0``).
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ContractError(f"expected a 3x3 matrix, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or np.linalg.det(R) <= 0:
        raise ContractError("rotation matrix is not orthonormal with det +1")
    q = _quat_from_rotm(R)
    return _pick_sign(q, prev)


def _pick_sign(q: np.ndarray, prev) -> np.ndarray:
    if prev is None:
        if q[0] < 0 or (q[0] == 0 and next((c for c in q[1:] if c != 0), 0) < 0):
            return -q
        return q
    return -q if float(np.dot(q, prev)) < 0 else q


def rotm_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = hat(a)
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def project_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar factor)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def euler_zyx(R) -> tuple[float, float, float]:
    """Roll, pitch, yaw of ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    roll = math.atan2(R[2, 1], R[2, 2])
    pitch = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


# ---------------------------------------------------------------------------
# State and input containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidState:
    r: np.ndarray
    v: np.ndarray
    R: np.ndarray
    q: np.ndarray
    w: np.ndarray

    @classmethod
    def hover(cls, r=(0.0, 0.0, 0.0), R=None) -> "RigidState":
        R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        return cls.make(r=r, v=np.zeros(3), R=R, w=np.zeros(3))

    @classmethod
    def make(cls, r, v, R, w, prev_q=None) -> "RigidState":
        R = np.asarray(R, dtype=float)
        return cls(
            r=np.asarray(r, dtype=float).copy(),
            v=np.asarray(v, dtype=float).copy(),
            R=R.copy(),
            q=quat_from_rotm(R, prev=prev_q),
            w=np.asarray(w, dtype=float).copy(),
        )

    def check(self, tol: float = 1e-9) -> None:
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > tol:
            raise ContractError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ContractError("det R != 1")
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-12:
            raise ContractError("q is not unit norm")
        if np.max(np.abs(_rotm_from_quat(self.q) - self.R)) > tol:
            raise ContractError("q and R disagree")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v, self.R.ravel(), self.w])


@dataclass(frozen=True)
class ControlInput:
    F: float
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    feasible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float))


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

def mixing_matrix(params: VehicleParams) -> np.ndarray:
    l = params.l
    k = params.drag_coeff / params.thrust_coeff
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [-l, -l, l, l],
        [l, -l, -l, l],
        [k, -k, k, -k],
    ])


def mix(rotor_thrusts, params: VehicleParams) -> ControlInput:
    T = np.asarray(rotor_thrusts, dtype=float)
    u = mixing_matrix(params) @ T
    feasible = bool(np.all(T >= 0) and np.all(T <= params.t_max))
    return ControlInput(F=float(u[0]), tau=u[1:], feasible=feasible)


def unmix(u: ControlInput, params: VehicleParams, tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Rotor thrusts realising ``u`` and whether they lie in ``[0, t_max]``."""
    T = np.linalg.solve(mixing_matrix(params), np.r_[u.F, u.tau])
    feasible = bool(np.all(T >= -tol) and np.all(T <= params.t_max + tol))
    return T, feasible


def saturate(u: ControlInput, params: VehicleParams) -> tuple[ControlInput, bool]:
    """Clamp ``F`` to ``[0, f_max]`` and scale torques uniformly until every rotor is feasible.

    Returns the feasible input and a flag telling whether anything was changed.
    """
    F = min(max(u.F, 0.0), params.f_max)
    changed = F != u.F
    Minv = np.linalg.inv(mixing_matrix(params))
    base = Minv[:, 0] * F
    dirn = Minv[:, 1:] @ u.tau
    alpha = 1.0
    for b, d in zip(base, dirn):
        if d > 0:
            alpha = min(alpha, (params.t_max - b) / d)
        elif d < 0:
            alpha = min(alpha, -b / d)
    alpha = max(alpha, 0.0)
    if alpha < 1.0:
        changed = True
    return ControlInput(F=F, tau=alpha * u.tau, feasible=True), changed
