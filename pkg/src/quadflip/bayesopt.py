"""Bayesian optimisation with a GP surrogate and the expected-improvement acquisition.

Maximises a black-box ``f`` over a box. Inputs are mapped to the unit cube and
outputs standardised before the surrogate is fitted.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm, qmc

from . import gp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("SearchBox requires lower < upper elementwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.lower) / self.width

    def from_unit(self, u):
        return self.lower + np.asarray(u, dtype=float) * self.width


def expected_improvement(mu, sigma, f_best):
    """``E[max(f - f_best, 0)]`` for ``f ~ N(mu, sigma²)``; vectorised."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    imp = mu - f_best
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, imp / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, imp * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass
class BoState:
    box: SearchBox
    X: list = field(default_factory=list)
    y: list = field(default_factory=list)
    seed: int = 0
    iteration: int = 0
    kernel: Optional[gp.SeKernel] = None
    noise_std: float = 1e-2
    model: Optional[gp.GpModel] = None
    y_shift: float = 0.0
    y_scale: float = 1.0
    incumbent_history: list = field(default_factory=list)
    penalised: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.y)

    def _unit_data(self):
        return self.box.to_unit(np.array(self.X)), np.array(self.y)

    def refit(self, tune: bool = False, n_restarts: int = 2, max_tune_points: int = 200) -> None:
        U, y = self._unit_data()
        self.y_shift = float(np.mean(y))
        self.y_scale = float(np.std(y)) or 1.0
        ys = (y - self.y_shift) / self.y_scale
        d = self.box.dim
        if self.kernel is None:
            self.kernel = gp.SeKernel.from_lengthscales(1.0, np.full(d, 0.3))
        if tune:
            rng = np.random.default_rng((self.seed, self.n))
            if len(ys) > max_tune_points:
                keep = np.argsort(-ys)[: max_tune_points // 4]
                rest = np.setdiff1d(np.arange(len(ys)), keep)
                keep = np.r_[keep, rng.choice(rest, max_tune_points - len(keep), replace=False)]
                Ut, yt = U[keep], ys[keep]
            else:
                Ut, yt = U, ys
            bounds = gp.HyperBounds(sigma_f=(0.05, 20.0), lengthscale=(0.01, 10.0), noise_std=(1e-3, 0.5))
            init = (self.kernel, float(np.clip(self.noise_std, 1e-3, 0.5)))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = gp.tune_hyperparameters(Ut, yt, init, bounds, n_restarts=n_restarts,
                                              seed=int(rng.integers(2 ** 31)), max_iter=100)
            self.kernel, self.noise_std = res.kernel, res.noise_std
        self.model = gp.fit(U, ys, self.kernel, self.noise_std)

    def posterior(self, U):
        mu, var = gp.predict(self.model, np.atleast_2d(U))
        return mu, np.sqrt(var)

    def incumbent(self) -> tuple[np.ndarray, float]:
        """Archived input with the largest posterior mean, and that mean (in objective units)."""
        U, _ = self._unit_data()
        mu = gp.predict_mean(self.model, U)
        i = int(np.argmax(mu))
        return np.array(self.X[i]), float(mu[i] * self.y_scale + self.y_shift)


# ---------------------------------------------------------------------------
# Acquisition maximisation
# ---------------------------------------------------------------------------

def _ei_unit(state: BoState, U, f_best_std):
    mu, sd = state.posterior(U)
    return expected_improvement(mu, sd, f_best_std)


def propose_next(state: BoState, box: Optional[SearchBox] = None, n_candidates: int = 4096, n_refine: int = 8,
                 rng: Optional[np.random.Generator] = None, max_rounds: int = 500) -> np.ndarray:
    """Approximate maximiser of EI: scrambled-Sobol screening, then batched coordinate search.

    Each of the ``n_refine`` best candidates is polished by compass search in the
    unit cube, halving the step until it falls below ``1e-6`` (relative to the box
    width) or ``max_rounds`` sweeps have run.
    """
    box = box or state.box
    if state.model is None:
        raise ValueError("surrogate has not been fitted")
    rng = rng or np.random.default_rng((state.seed, state.n, 1))
    d = box.dim
    sob = qmc.Sobol(d, scramble=True, seed=rng)
    m = int(math.ceil(math.log2(max(n_candidates, 2))))
    cand = sob.random_base2(m)[:n_candidates]
    U_data, _ = state._unit_data()
    f_best = float(np.max(gp.predict_mean(state.model, U_data)))
    ei = _ei_unit(state, cand, f_best)
    if not np.any(ei > 0):
        _, sd = state.posterior(cand)
        if np.all(sd <= 1e-12):
            warnings.warn("surrogate is degenerate; proposing a uniform random point", RuntimeWarning)
            return box.from_unit(rng.random(d))
    order = np.argsort(-ei)[:n_refine]
    pts = cand[order].copy()
    vals = ei[order].copy()
    step = np.full(len(pts), 0.05)
    active = np.ones(len(pts), dtype=bool)
    eye = np.eye(d)
    rounds = 0
    while np.any(active) and rounds < max_rounds:
        rounds += 1
        idx = np.flatnonzero(active)
        nb = (pts[idx, None, :] + step[idx, None, None] * np.concatenate([eye, -eye])[None]).clip(0.0, 1.0)
        flat = nb.reshape(-1, d)
        e = _ei_unit(state, flat, f_best).reshape(len(idx), 2 * d)
        best = np.argmax(e, axis=1)
        for k, i in enumerate(idx):
            if e[k, best[k]] > vals[i] * (1 + 1e-12) and e[k, best[k]] > vals[i] + 1e-300:
                pts[i] = nb[k, best[k]]
                vals[i] = e[k, best[k]]
            else:
                step[i] *= 0.5
                if step[i] < 1e-6:
                    active[i] = False
    j = int(np.argmax(vals))
    return box.from_unit(pts[j])


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass
class BoResult:
    x_best: np.ndarray
    f_best: float
    X: np.ndarray
    y: np.ndarray
    incumbent_history: list

    @property
    def best_observed(self) -> float:
        return float(np.max(self.y))


def initial_design(box: SearchBox, n: int, seed: int) -> np.ndarray:
    """Latin-hypercube (stratified) sample of ``n`` points in the box."""
    lhs = qmc.LatinHypercube(box.dim, seed=np.random.default_rng((seed, 0)))
    return box.from_unit(lhs.random(n))


def _penalised(y: float, genuine: list) -> tuple[float, bool]:
    """Value to archive for ``y`` and whether it is a penalty.

    Penalties sit well below the worst genuine evaluation (ten times it for a
    negative-valued objective). Earlier penalties never feed back into later ones.
    """
    if math.isfinite(y):
        return y, False
    if not genuine:
        return -1e6, True
    worst, best = min(genuine), max(genuine)
    return worst - 9.0 * max(abs(worst), best - worst, 1e-12), True


def optimize(objective: Callable[[np.ndarray], float], box: SearchBox, n_init: int, n_iter: int, seed: int = 0,
             retune_every: int = 25, archive_path: Optional[str | Path] = None,
             resume_from: Optional[str | Path] = None, n_candidates: int = 4096,
             n_refine: int = 8) -> BoResult:
    """Maximise ``objective`` over ``box``.

    ``n_init`` Latin-hypercube evaluations are followed by ``n_iter`` rounds of
    propose → evaluate → refit. Hyper-parameters are re-tuned every
    ``retune_every`` iterations. Non-finite objective values are archived with a
    penalty below the worst value seen. The returned point maximises the
    posterior mean over the archive.
    """
    if n_init < 2:
        raise ValueError("n_init must be at least 2")
    state = BoState(box=box, seed=seed)
    genuine: list = []

    def evaluate(x):
        y, pen = _penalised(float(objective(x)), genuine)
        if not pen:
            genuine.append(y)
        state.penalised.append(pen)
        state.X.append(np.asarray(x))
        state.y.append(y)
        return y

    if resume_from is not None:
        for x, y, pen in read_archive(resume_from):
            state.X.append(np.asarray(x))
            state.y.append(float(y))
            state.penalised.append(pen)
            if not pen:
                genuine.append(float(y))
    writer = _ArchiveWriter(archive_path, box.dim) if archive_path else None
    for x in initial_design(box, n_init, seed)[len(state.y):]:
        evaluate(x)
    state.refit(tune=True)
    if writer:
        for i, (x, y) in enumerate(zip(state.X, state.y)):
            writer.write(i, x, y, max(state.y[: i + 1]), state.penalised[i])
    done = max(0, len(state.y) - n_init)
    for it in range(done, n_iter):
        rng = np.random.default_rng((seed, it, 7))
        x = propose_next(state, box, n_candidates=n_candidates, n_refine=n_refine, rng=rng)
        y = evaluate(x)
        state.iteration = it + 1
        state.refit(tune=(it + 1) % retune_every == 0)
        _, inc = state.incumbent()
        state.incumbent_history.append(inc)
        if writer:
            writer.write(len(state.y) - 1, x, y, inc, state.penalised[-1])
        if (it + 1) % 50 == 0:
            log.info("BO iteration %d: incumbent %.6g", it + 1, inc)
    x_best, f_best = state.incumbent()
    if writer:
        writer.close()
    return BoResult(x_best, f_best, np.array(state.X), np.array(state.y), state.incumbent_history)


class _ArchiveWriter:
    def __init__(self, path, dim):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(["iteration"] + [f"x{i}" for i in range(dim)] + ["y", "incumbent", "penalised"])

    def write(self, i, x, y, inc, penalised=False):
        self.w.writerow([i] + [repr(float(v)) for v in x] + [repr(float(y)), repr(float(inc)), int(penalised)])
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_archive(path) -> list:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        nx = sum(1 for h in header if h.startswith("x"))
        has_pen = "penalised" in header
        for row in r:
            pen = bool(int(row[header.index("penalised")])) if has_pen else False
            out.append(([float(v) for v in row[1:1 + nx]], float(row[1 + nx]), pen))
    return out
