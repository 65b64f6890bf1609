"""Learning the residual torque from disturbed flight data.

Flips are flown with the nominal geometric controller under a disturbance.
The residual torque seen by each sample is

    Δ_R ≈ J ω'_meas - (τ - ω × Jω)

with ``ω'`` from a five-point central difference at the midpoint of each
zero-order-hold interval, where the applied torque is constant. Two scalar
GPs on ``(q1, q2, ωx, ωy)`` model the roll and pitch components. They are
baked into lookup tables for the adaptive controller.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import gp
from .control import AdaptiveModel, GeomGains, GeometricController, adaptive_inputs
from .planner import FlipReference, PlanarBox, SigmoidAttitudeParams, plan_flip
from .rigid import RigidState, VehicleParams, rotm_axis_angle
from .sim import Disturbance, RollPitchDisturbance, SimLog, ZeroOrderHold, rollout

log = logging.getLogger(__name__)

MIN_SAMPLES = 125
GRID_SHAPE = (5, 9, 5, 9)      # 2025 nodes over (q1, q2, ωx, ωy)


class InsufficientDataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Flying the reference
# ---------------------------------------------------------------------------

def perturbed_start(rng: np.random.Generator, max_tilt_deg: float = 2.0) -> RigidState:
    """Hover state at the origin with a random attitude offset of at most ``max_tilt_deg``."""
    axis = rng.normal(size=3)
    angle = math.radians(max_tilt_deg) * rng.uniform(-1.0, 1.0)
    return RigidState.hover(R=rotm_axis_angle(axis, angle))


def fly(reference: FlipReference, params: VehicleParams, controller: GeometricController,
        d: Optional[Disturbance] = None, x0: Optional[RigidState] = None, h: float = 1e-3,
        period: float = 2e-3) -> SimLog:
    """Track ``reference`` over its full duration with a zero-order-held controller."""
    zoh = ZeroOrderHold(controller, period)
    return rollout(x0 or RigidState.hover(), zoh, params, d, T=reference.duration, h=h,
                   observer=controller.observer)


# ---------------------------------------------------------------------------
# Residual extraction
# ---------------------------------------------------------------------------

_STENCIL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def extract_residuals(sim: SimLog, params: VehicleParams, period: float) -> tuple[np.ndarray, np.ndarray]:
    """GP inputs and residual torques, one sample per hold interval.

    The physics step must divide the hold period into at least four steps, so
    that the stencil at the interval midpoint stays inside the interval.
    """
    h = float(sim.t[1] - sim.t[0])
    k = int(round(period / h))
    if abs(k * h - period) > 1e-12 or k < 4 or k % 2:
        raise ValueError("hold period must be an even multiple (≥ 4) of the physics step")
    J = params.J
    W = np.array([s.w for s in sim.states])
    X, Y = [], []
    for start in range(0, len(sim.states) - k, k):
        mid = start + k // 2
        idx = mid + np.arange(-2, 3)
        wdot = _STENCIL @ W[idx] / h
        x = sim.states[mid]
        tau = sim.inputs[mid].tau
        X.append(adaptive_inputs(x))
        Y.append(J @ wdot - (tau - np.cross(x.w, J @ x.w)))
    return np.array(X), np.array(Y)


def space_filling_subset(X: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Indices of ``n`` rows chosen by greedy farthest-point selection in standardised coordinates."""
    if len(X) < n:
        raise InsufficientDataError(f"need at least {n} samples, have {len(X)}")
    Z = (X - X.mean(0)) / np.where(X.std(0) > 0, X.std(0), 1.0)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(Z)))]
    d2 = np.sum((Z - Z[chosen[0]]) ** 2, axis=1)
    for _ in range(n - 1):
        i = int(np.argmax(d2))
        chosen.append(i)
        d2 = np.minimum(d2, np.sum((Z - Z[i]) ** 2, axis=1))
    return np.array(chosen)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    n_rollouts: int = 4
    n_train: int = MIN_SAMPLES
    n_holdout_rollouts: int = 1
    h: float = 5e-4
    period: float = 2e-3
    max_tilt_deg: float = 2.0
    noise_std: float = 0.0           # optional additive noise on the residual targets (N·m)
    grid_shape: tuple = GRID_SHAPE
    n_restarts: int = 8
    saturate: bool = True            # rotor limits on the data-collection controller
    seed: int = 0


@dataclass
class TrainingResult:
    models: tuple                    # (GpModel, GpModel) in standardised output units
    scales: tuple                    # output scale per GP
    tables: tuple                    # (LookupTable, LookupTable) in N·m
    X_train: np.ndarray
    Y_train: np.ndarray
    X_holdout: np.ndarray
    Y_holdout_true: np.ndarray
    report: dict = field(default_factory=dict)

    def adaptive_model(self, **kw) -> AdaptiveModel:
        return AdaptiveModel(self.tables[0], self.tables[1], **kw)

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, model, scale, table in zip(("x", "y"), self.models, self.scales, self.tables):
            d = model.to_dict()
            d["output_scale"] = scale
            (out / f"gp_{name}.json").write_text(json.dumps(d, indent=1) + "\n")
            table.save(out / f"table_{name}.lut")
            table.to_csv(out / f"table_{name}.csv")
            paths[name] = str(out / f"table_{name}.lut")
        (out / "training_report.json").write_text(json.dumps(self.report, indent=2, sort_keys=True) + "\n")
        return paths


def collect(reference: FlipReference, params: VehicleParams, d: Disturbance, n_rollouts: int,
            cfg: TrainingConfig, rng: np.random.Generator, gains: GeomGains = GeomGains()):
    X, Y = [], []
    for _ in range(n_rollouts):
        ctl = GeometricController(params, reference, gains, mode="nominal", apply_saturation=cfg.saturate)
        sim = fly(reference, params, ctl, d, perturbed_start(rng, cfg.max_tilt_deg), cfg.h, cfg.period)
        xi, yi = extract_residuals(sim, params, cfg.period)
        X.append(xi)
        Y.append(yi)
    return np.vstack(X), np.vstack(Y)


def _grid(lo, hi, n):
    if hi - lo < 1e-9:
        lo, hi = lo - 1e-3, hi + 1e-3
    return np.linspace(lo, hi, n)


def train_residual_gps(params: VehicleParams = VehicleParams(), d: Optional[Disturbance] = None,
                       cfg: TrainingConfig = TrainingConfig(), reference: Optional[FlipReference] = None,
                       gains: GeomGains = GeomGains()) -> TrainingResult:
    """Fly, extract residuals, fit the roll/pitch GPs and export their tables."""
    d = d or RollPitchDisturbance()
    rng = np.random.default_rng(cfg.seed)
    if reference is None:
        reference = FlipReference(plan_flip(SigmoidAttitudeParams(), PlanarBox(), params=params))
    X_all, Y_all = collect(reference, params, d, cfg.n_rollouts, cfg, rng, gains)
    if len(X_all) < cfg.n_train:
        raise InsufficientDataError(f"need at least {cfg.n_train} samples, have {len(X_all)}")
    idx = space_filling_subset(X_all, cfg.n_train, cfg.seed)
    X = X_all[idx]
    Y = Y_all[idx, :2] + cfg.noise_std * rng.normal(size=(len(idx), 2))

    # held-out flights use fresh initial attitudes
    X_ho, _ = collect(reference, params, d, cfg.n_holdout_rollouts, cfg, rng, gains)
    Y_ho = np.array([d(_state_from_inputs(z))[1][:2] for z in X_ho])

    lo = np.minimum(X.min(0), X_ho.min(0))
    hi = np.maximum(X.max(0), X_ho.max(0))
    grids = [_grid(a, b, n) for a, b, n in zip(lo, hi, cfg.grid_shape)]
    models, scales, tables = [], [], []
    for j in range(2):
        scale = float(np.std(Y[:, j])) or 1.0
        ys = Y[:, j] / scale
        init = (gp.SeKernel.from_lengthscales(1.0, np.maximum(hi - lo, 1e-2)), 0.05)
        bounds = gp.HyperBounds(sigma_f=(1e-2, 1e2), lengthscale=(1e-3, 1e3), noise_std=(1e-3, 1.0))
        res = gp.tune_hyperparameters(X, ys, init, bounds, n_restarts=cfg.n_restarts, seed=cfg.seed + j)
        model = gp.fit(X, ys, res.kernel, res.noise_std)
        table = gp.export_table(model, grids, seed=cfg.seed + j,
                                meta={"output": ["tau_x", "tau_y"][j], "inputs": ["q1", "q2", "wx", "wy"],
                                      "units": "N*m", "output_scale": scale})
        table = replace(table, mean=table.mean * scale, std=table.std * scale,
                        max_error_mean=table.max_error_mean * scale, max_error_std=table.max_error_std * scale)
        models.append(model)
        scales.append(scale)
        tables.append(table)

    result = TrainingResult(tuple(models), tuple(scales), tuple(tables), X, Y, X_ho, Y_ho)
    result.report = evaluate_holdout(result, d)
    result.report.update({"n_pool": int(len(X_all)), "n_train": int(len(X)), "n_holdout": int(len(X_ho)),
                          "seed": cfg.seed, "noise_std": cfg.noise_std,
                          "hyper": [{"sigma_f": m.kernel.sigma_f, "lengthscales": m.kernel.lengthscales.tolist(),
                                     "noise_std": m.noise_std} for m in models]})
    log.info("GP training: %s", {k: result.report[k] for k in ("coverage", "rmse")})
    return result


def _state_from_inputs(z) -> RigidState:
    """A state carrying the GP inputs in its quaternion mirror (enough for quaternion-driven disturbances)."""
    q1, q2 = float(z[0]), float(z[1])
    q0 = math.sqrt(max(0.0, 1.0 - q1 * q1 - q2 * q2))
    x = RigidState.hover()
    return replace(x, q=np.array([q0, q1, q2, 0.0]), w=np.array([z[2], z[3], 0.0]))


def evaluate_holdout(result: TrainingResult, d: Disturbance) -> dict:
    """Coverage of the 2σ band and RMSE against the true disturbance at held-out states."""
    covered = np.ones(len(result.X_holdout), dtype=bool)
    rmse = []
    for j, (model, scale) in enumerate(zip(result.models, result.scales)):
        mu, var = gp.predict(model, result.X_holdout)
        mu, sd = mu * scale, np.sqrt(var) * scale
        err = result.Y_holdout_true[:, j] - mu
        covered &= np.abs(err) <= 2.0 * sd
        rmse.append(float(np.sqrt(np.mean(err ** 2))))
    return {"coverage": float(np.mean(covered)), "rmse": rmse, "rmse_max": max(rmse)}
