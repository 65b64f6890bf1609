"""Scenario files: schema, validation and the end-to-end runners behind the CLI.

A scenario is an INI file. ``[scenario]`` names the run, selects the mode and
fixes the seed. The remaining sections configure the vehicle, disturbance,
integrator, feedforward schedule, planner, gains, GP compensation and
training. Unknown sections or keys are schema errors, reported with their
``section.key`` path.
"""
from __future__ import annotations

import configparser
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__, feedforward as ff
from .control import AdaptiveModel, GeomGains, GeometricController
from .planner import FlipReference, PlanarBox, SigmoidAttitudeParams, plan_flip
from .rigid import RigidState, VehicleParams
from .sim import RollPitchDisturbance, SimLog
from .training import TrainingConfig, fly, perturbed_start, train_residual_gps

OUTPUT_ROOT_ENV = "QUADFLIP_OUTPUT_ROOT"
SUMMARY_VERSION = 1
MODES = ("feedforward", "geometric-nominal", "geometric-adaptive", "geometric-robust")


class SchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# Field parsers
# ---------------------------------------------------------------------------

def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _positive(s: str) -> float:
    v = _float(s)
    if v <= 0:
        raise ValueError("must be positive")
    return v


def _nonneg(s: str) -> float:
    v = _float(s)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


def _int(s: str) -> int:
    return int(s)


def _posint(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise ValueError("must be a positive integer")
    return v


def _nonnegint(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError("must be a non-negative integer")
    return v


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _str(s: str) -> str:
    return s.strip()


def _floats(n: int) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        vals = tuple(_float(p) for p in s.replace(";", ",").split(",") if p.strip())
        if len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return vals
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


# section -> key -> (parser, default); a default of ``...`` marks a required key
SCHEMA: dict[str, dict[str, tuple]] = {
    "scenario": {
        "name": (_str, ...),
        "mode": (_choice(*MODES), ...),
        "seed": (_int, ...),
        "vehicle": (_str, None),
        "output_dir": (_str, None),
        "z_up_csv": (_bool, False),
    },
    "vehicle": {k: (_positive, None) for k in VehicleParams.__dataclass_fields__ if k != "g"} | {"g": (_nonneg, None)},
    "disturbance": {
        "type": (_choice("none", "roll-pitch"), "none"),
        "amplitude": (_floats(3), (-0.007, -0.007, 0.0)),
    },
    "simulation": {
        "h": (_positive, 1e-3),
        "controller_period": (_positive, 2e-3),
        "saturate": (_bool, True),
        "initial_tilt_deg": (_nonneg, 0.0),
        "escape_radius": (_positive, 100.0),
    },
    "feedforward": {
        "eta": (_floats(5), None),
        "eta_file": (_str, None),
        "beta_frac": (_positive, 0.05),
        "u_coast": (_nonneg, 2.0),
        "u_max": (_positive, 18.0),
        "t_min": (_positive, 0.05),
        "t_max": (_positive, 0.3),
    },
    "optimizer": {
        "n_init": (_posint, 250),
        "n_iter": (_nonnegint, 1000),
        "retune_every": (_posint, 25),
        "resume": (_str, None),
    },
    "planner": {
        "nu_m": (_positive, 35.0),
        "t_m": (_positive, 0.7),
        "x_min": (_float, -0.15),
        "x_max": (_float, 0.0),
        "h_min": (_float, 0.0),
        "h_max": (_float, 0.3),
        "f_max": (_positive, None),
        "ts": (_positive, 2e-3),
        "t_pre": (_nonneg, 0.5),
        "t_post": (_nonneg, 1.5),
        "t_rec": (_nonneg, 1.0),
    },
    "gains": {
        "k_r": (_positive, None), "k_v": (_positive, None), "k_R": (_positive, None), "k_w": (_positive, None),
        "c1": (_positive, None), "c2": (_positive, None), "eps_r": (_positive, None), "eps_R": (_positive, None),
        "tau_exp": (_positive, None),
    },
    "adaptive": {
        "source": (_choice("train", "tables"), "train"),
        "table_x": (_str, None),
        "table_y": (_str, None),
        "aggregation": (_choice("euclidean", "max"), "euclidean"),
    },
    "training": {
        "n_rollouts": (_posint, 4),
        "n_train": (_posint, 125),
        "n_holdout_rollouts": (_posint, 1),
        "h": (_positive, 5e-4),
        "noise_std": (_nonneg, 0.0),
        "n_restarts": (_nonnegint, 8),
        "saturate": (_bool, None),
    },
}


@dataclass
class Scenario:
    path: Optional[Path]
    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def name(self) -> str:
        return self.values["scenario"]["name"]

    @property
    def mode(self) -> str:
        return self.values["scenario"]["mode"]

    @property
    def seed(self) -> int:
        return self.values["scenario"]["seed"]

    def resolve(self, p: str) -> Path:
        """Paths inside a scenario are relative to the scenario file."""
        q = Path(p)
        if q.is_absolute() or self.path is None:
            return q
        return self.path.parent / q

    def vehicle(self) -> VehicleParams:
        base = VehicleParams()
        if self.values["scenario"]["vehicle"]:
            vp = self.resolve(self.values["scenario"]["vehicle"])
            if not vp.exists():
                raise SchemaError("scenario.vehicle", f"file {vp} does not exist")
            base = VehicleParams.from_file(vp)
        overrides = {k: v for k, v in self.values["vehicle"].items() if v is not None}
        return base.with_(**overrides) if overrides else base

    def gains(self) -> GeomGains:
        given = {k: v for k, v in self.values["gains"].items() if v is not None}
        try:
            return GeomGains(**given)
        except (TypeError, ValueError) as exc:
            raise SchemaError("gains", str(exc)) from None

    def disturbance(self):
        d = self.values["disturbance"]
        return RollPitchDisturbance(tuple(d["amplitude"])) if d["type"] == "roll-pitch" else None

    def output_dir(self, override: Optional[str | Path] = None) -> Path:
        if override is not None:
            return Path(override)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        return root / (self.values["scenario"]["output_dir"] or self.name)


def parse_scenario(text: str, path: Optional[Path] = None, purpose: str = "run") -> Scenario:
    """Validate ``text``. ``purpose="optimize"`` drops the requirement of a fixed ``η`` in feedforward mode."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str              # keys are case-sensitive (k_R vs k_r)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise SchemaError("<file>", f"not a valid INI file ({exc.__class__.__name__})") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise SchemaError(sec, "unknown section")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise SchemaError(f"{sec}.{key}", "unknown key")
    values: dict[str, dict[str, Any]] = {}
    for sec, fields in SCHEMA.items():
        out = {}
        for key, (parser, default) in fields.items():
            raw = cp.get(sec, key, fallback=None) if cp.has_section(sec) else None
            if raw is None or raw.strip() == "":
                if default is ...:
                    raise SchemaError(f"{sec}.{key}", "required key missing")
                out[key] = default
                continue
            try:
                out[key] = parser(raw)
            except ValueError as exc:
                raise SchemaError(f"{sec}.{key}", f"invalid value {raw!r} ({exc})") from None
        values[sec] = out
    sc = Scenario(path, values)
    _check_mode_blocks(sc, purpose)
    return sc


def load_scenario(path: str | Path, purpose: str = "run") -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise SchemaError("<file>", f"scenario file {p} not found")
    return parse_scenario(p.read_text(), p, purpose)


def _check_mode_blocks(sc: Scenario, purpose: str) -> None:
    if sc.mode == "feedforward":
        f = sc["feedforward"]
        given = (f["eta"] is not None) + (f["eta_file"] is not None)
        if given > 1 or (given == 0 and purpose == "run"):
            raise SchemaError("feedforward.eta", "give exactly one of eta or eta_file for mode feedforward")
    else:
        if sc["feedforward"]["eta"] is not None or sc["feedforward"]["eta_file"] is not None:
            raise SchemaError("feedforward", f"section not used by mode {sc.mode}")
    if sc.mode in ("geometric-adaptive", "geometric-robust"):
        a = sc["adaptive"]
        if a["source"] == "tables" and not (a["table_x"] and a["table_y"]):
            raise SchemaError("adaptive.table_x", "source = tables needs table_x and table_y")
    s = sc["simulation"]
    k = s["controller_period"] / s["h"]
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise SchemaError("simulation.controller_period", "must be a positive integer multiple of simulation.h")
    if s["h"] > 0.01:
        raise SchemaError("simulation.h", "must not exceed 0.01 s")


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _wrap(a: float) -> float:
    return float((a + math.pi) % (2.0 * math.pi) - math.pi)


def _pitch_sweep(states) -> tuple[float, float]:
    th = ff.pitch_unwrapped(states)
    sweep = float(th[-1] - th[0])
    return sweep, _wrap(sweep)


def load_eta(sc: Scenario) -> ff.PrimitiveParams:
    f = sc["feedforward"]
    if f["eta"] is not None:
        return ff.PrimitiveParams.from_vector(f["eta"])
    p = sc.resolve(f["eta_file"])
    if not p.exists():
        raise SchemaError("feedforward.eta_file", f"file {p} does not exist")
    return ff.PrimitiveParams.from_vector(json.loads(p.read_text())["eta_vector"])


def envelope(sc: Scenario) -> ff.Envelope:
    f = sc["feedforward"]
    return ff.Envelope(beta_frac=f["beta_frac"], u_coast=f["u_coast"], u_max=f["u_max"],
                       t_min=f["t_min"], t_max=f["t_max"])


def reference(sc: Scenario, params: VehicleParams) -> FlipReference:
    p = sc["planner"]
    plan = plan_flip(SigmoidAttitudeParams(p["nu_m"], p["t_m"]),
                     PlanarBox(p["x_min"], p["x_max"], p["h_min"], p["h_max"]),
                     f_max=p["f_max"], Ts=p["ts"], params=params)
    return FlipReference(plan, t_pre=p["t_pre"], t_post=p["t_post"], t_rec=p["t_rec"])


def training_config(sc: Scenario) -> TrainingConfig:
    t = sc["training"]
    sat = sc["simulation"]["saturate"] if t["saturate"] is None else t["saturate"]
    return TrainingConfig(n_rollouts=t["n_rollouts"], n_train=t["n_train"], n_holdout_rollouts=t["n_holdout_rollouts"],
                          h=t["h"], period=sc["simulation"]["controller_period"], noise_std=t["noise_std"],
                          n_restarts=t["n_restarts"], saturate=sat, seed=sc.seed)


def adaptive_model(sc: Scenario, params: VehicleParams, ref: FlipReference,
                   out_dir: Optional[Path] = None) -> AdaptiveModel:
    a = sc["adaptive"]
    if a["source"] == "tables":
        px, py = sc.resolve(a["table_x"]), sc.resolve(a["table_y"])
        for key, p in (("adaptive.table_x", px), ("adaptive.table_y", py)):
            if not p.exists():
                raise SchemaError(key, f"file {p} does not exist")
        return AdaptiveModel.load(px, py, aggregation=a["aggregation"])
    d = sc.disturbance() or RollPitchDisturbance()
    res = train_residual_gps(params, d, training_config(sc), ref, sc.gains())
    if out_dir is not None:
        res.save(out_dir / "gp")
    return res.adaptive_model(aggregation=a["aggregation"])


def run_scenario(sc: Scenario, out_dir: Optional[str | Path] = None) -> dict:
    """Execute a scenario, write ``traj.csv`` and ``summary.json``, and return the summary."""
    out = sc.output_dir(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = sc.vehicle()
    sim = sc["simulation"]
    d = sc.disturbance()
    rng = np.random.default_rng(sc.seed)
    x0 = perturbed_start(rng, sim["initial_tilt_deg"]) if sim["initial_tilt_deg"] > 0 else RigidState.hover()
    t0 = time.perf_counter()
    extra: dict = {}
    if sc.mode == "feedforward":
        eta = load_eta(sc)
        sched = ff.expand_schedule(eta, params, envelope(sc))
        ts, states, inputs = ff.simulate_3d(sched, params, sim["h"], d, x0)
        log = SimLog(t=ts, states=states, inputs=inputs)
        sweep, pitch_err = _pitch_sweep(states)
        xf = states[-1]
        e = [xf.r[0] - x0.r[0], xf.r[2] - x0.r[2], xf.v[0], xf.v[2], pitch_err]
        disp = np.array([s.r - x0.r for s in states])
        summary_vals = dict(final_state_error=[float(v) for v in e], max_psi=None,
                            max_er=float(np.max(np.linalg.norm(disp, axis=1))), saturation_count=0)
        extra = {"eta": eta.as_vector().tolist(), "schedule_durations": sched.durations.tolist(),
                 "planar_final_state_error": ff.final_state_error(eta, params, envelope(sc), sim["h"])[0].tolist()}
        ff.export_schedule_csv(sched, params, out / "schedule.csv")
    else:
        ref = reference(sc, params)
        ref.to_json(out / "reference.json")
        mode = sc.mode.split("-", 1)[1]
        am = adaptive_model(sc, params, ref, out) if mode != "nominal" else None
        ctl = GeometricController(params, ref, sc.gains(), mode=mode, adaptive=am, apply_saturation=sim["saturate"])
        log = fly(ref, params, ctl, d, x0, sim["h"], sim["controller_period"])
        sweep, pitch_err = _pitch_sweep(log.states)
        psi = log.diagnostics["psi"]
        er = log.diagnostics["er"]
        xf = log.states[-1]
        final_ref = ref(float(log.t[-1]))
        e = np.r_[xf.r - final_ref.r_d, xf.v - final_ref.v_d]
        a, b = ref.flip_window
        win = (log.t >= a) & (log.t <= b)
        summary_vals = dict(final_state_error=[float(v) for v in e], max_psi=float(psi.max()),
                            max_er=float(np.max(np.linalg.norm(er, axis=1))), saturation_count=ctl.saturation_count)
        extra = {"max_abs_erx": float(np.max(np.abs(er[:, 0]))), "max_psi_flip_window": float(psi[win].max()),
                 "final_er": float(np.linalg.norm(er[-1])), "qp": ref.plan.stats()}
        if am is not None:
            extra.update({"delta_R": am.delta_R, "table_clamp_count": am.clamp_count})
    runtime = time.perf_counter() - t0
    log.to_csv(out / "traj.csv", z_up=sc["scenario"]["z_up_csv"])
    summary = {
        "summary_version": SUMMARY_VERSION,
        "quadflip_version": __version__,
        "scenario": sc.name,
        "mode": sc.mode,
        "seed": sc.seed,
        **summary_vals,
        "final_pitch_error": pitch_err,
        "pitch_sweep": sweep,
        "runtime_s": runtime,
        "n_steps": int(len(log.t) - 1),
        "h": sim["h"],
        "details": extra,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

COMPARE_CHANNELS = ("psi", "er0", "er1", "er2", "eR0", "eR1", "eR2")


def _read_traj(path: Path) -> tuple[list, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def compare_runs(run_dirs, out_dir: Optional[Path] = None) -> dict:
    """Per-channel max/RMS of the tracking errors across runs, with deltas to the first run."""
    runs = []
    for rd in map(Path, run_dirs):
        traj = rd / "traj.csv"
        if not traj.is_file():
            raise FileNotFoundError(f"{traj} not found")
        runs.append((rd, *_read_traj(traj)))
    t0 = runs[0][2][:, 0]
    for rd, _, data in runs[1:]:
        if data.shape[0] != len(t0) or not np.allclose(data[:, 0], t0, rtol=0, atol=1e-12):
            raise ValueError(f"time grid of {rd} differs from {runs[0][0]}")
    table = []
    for rd, header, data in runs:
        row = {"run": str(rd)}
        for ch in COMPARE_CHANNELS:
            if ch in header:
                col = np.abs(data[:, header.index(ch)])
                row[f"{ch}_max"] = float(col.max())
                row[f"{ch}_rms"] = float(np.sqrt(np.mean(col ** 2)))
        table.append(row)
    keys = [k for k in table[0] if k != "run"]
    for row in table:
        for k in keys:
            if k in row:
                row[f"{k}_delta"] = row[k] - table[0][k]
    result = {"runs": table}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        cols = ["run"] + sorted({k for row in table for k in row if k != "run"})
        with open(out_dir / "comparison.csv", "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in table:
                fh.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
    return result
