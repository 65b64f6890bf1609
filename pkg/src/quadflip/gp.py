"""Exact Gaussian-process regression with a squared-exponential (ARD) kernel.

Fitting caches the Cholesky factor of ``K + σ_ε² I``; prediction returns the
posterior mean and variance. Hyper-parameters are tuned by maximising the log
marginal likelihood in log-space with multi-start L-BFGS-B. Trained models can
be baked into multilinear lookup tables for cheap evaluation inside a
controller loop.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

JITTER_FLOOR = 1e-8
JITTER_CEIL = 1e-4


class IllConditionedError(np.linalg.LinAlgError):
    def __init__(self, jitter: float):
        super().__init__(f"Gram matrix not positive definite even with jitter {jitter:g}")
        self.jitter = jitter


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeKernel:
    """``σ_f² exp(-½ (x-x̃)ᵀ Λ⁻¹ (x-x̃))`` with diagonal ``Λ``.

    ``lam`` holds the diagonal of ``Λ`` (squared length-scales).
    """

    sigma_f: float
    lam: tuple

    def __post_init__(self):
        lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        object.__setattr__(self, "lam", lam)
        if not self.sigma_f > 0:
            raise ValueError("sigma_f must be positive")
        if not all(v > 0 for v in lam):
            raise ValueError("lengthscale entries must be positive")

    @classmethod
    def from_lengthscales(cls, sigma_f: float, lengthscales) -> "SeKernel":
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        return cls(sigma_f, tuple(ls ** 2))

    @property
    def dim(self) -> int:
        return len(self.lam)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.lam))

    def matrix(self, A, B) -> np.ndarray:
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        if A.shape[1] != self.dim or B.shape[1] != self.dim:
            raise ValueError(f"kernel dimension {self.dim} does not match inputs {A.shape[1]}, {B.shape[1]}")
        ls = self.lengthscales
        a = A / ls
        b = B / ls
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        np.maximum(d2, 0.0, out=d2)
        return self.sigma_f ** 2 * np.exp(-0.5 * d2)


def kernel_eval(k: SeKernel, x, x_tilde) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_tilde = np.atleast_1d(np.asarray(x_tilde, dtype=float))
    if x.shape != (k.dim,) or x_tilde.shape != (k.dim,):
        raise ValueError(f"expected {k.dim}-dimensional inputs, got {x.shape} and {x_tilde.shape}")
    diff = x - x_tilde
    return float(k.sigma_f ** 2 * math.exp(-0.5 * float(np.sum(diff * diff / np.asarray(k.lam)))))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def zero_mean(X):
    return np.zeros(len(np.atleast_2d(X)))


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray
    Y: np.ndarray
    kernel: SeKernel
    noise_std: float
    L: np.ndarray
    alpha: np.ndarray
    jitter: float
    mean_fn: Callable = zero_mean

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def to_dict(self) -> dict:
        return {
            "sigma_f": self.kernel.sigma_f,
            "lam": list(self.kernel.lam),
            "noise_std": self.noise_std,
            "X": self.X.tolist(),
            "Y": self.Y.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "GpModel":
        d = json.loads(Path(path).read_text())
        return fit(d["X"], d["Y"], SeKernel(d["sigma_f"], tuple(d["lam"])), d["noise_std"])


def _factor(K: np.ndarray, noise_var: float) -> tuple[np.ndarray, float]:
    n = len(K)
    diag = max(noise_var, JITTER_FLOOR)
    while True:
        try:
            return np.linalg.cholesky(K + diag * np.eye(n)), diag
        except np.linalg.LinAlgError:
            if diag >= JITTER_CEIL:
                raise IllConditionedError(diag) from None
            diag = max(diag * 10.0, JITTER_FLOOR)


def fit(X, Y, kernel: SeKernel, noise_std: float, mean_fn: Callable = zero_mean) -> GpModel:
    """Condition the GP prior on ``(X, Y)``.

    The diagonal term is ``max(σ_ε², 1e-8)``; on factorisation failure it is
    escalated ×10 up to ``1e-4``. :attr:`GpModel.jitter` records the value used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] != len(Y) or len(Y) < 1:
        raise ValueError("X and Y must contain the same positive number of samples")
    if X.shape[1] != kernel.dim:
        raise ValueError(f"kernel dimension {kernel.dim} does not match inputs {X.shape[1]}")
    K = kernel.matrix(X, X)
    L, used = _factor(K, float(noise_std) ** 2)
    resid = Y - mean_fn(X)
    alpha = cho_solve((L, True), resid)
    return GpModel(X=X, Y=Y, kernel=kernel, noise_std=float(noise_std), L=L, alpha=alpha,
                   jitter=used, mean_fn=mean_fn)


def predict_mean(model: GpModel, X) -> np.ndarray:
    """Posterior mean only, for a batch ``(n, d)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return model.mean_fn(X) + model.kernel.matrix(model.X, X).T @ model.alpha


def predict(model: GpModel, x_star):
    """Posterior mean and variance at one point (scalars) or a batch ``(n, d)`` (arrays)."""
    xs = np.asarray(x_star, dtype=float)
    single = xs.ndim == 1
    xs = np.atleast_2d(xs)
    if xs.shape[1] != model.dim:
        raise ValueError(f"expected {model.dim}-dimensional query, got {xs.shape[1]}")
    Ks = model.kernel.matrix(model.X, xs)
    mu = model.mean_fn(xs) + Ks.T @ model.alpha
    v = solve_triangular(model.L, Ks, lower=True, check_finite=False)
    var = model.kernel.sigma_f ** 2 - np.einsum("ij,ij->j", v, v)
    var = np.where((var < 0) & (var > -1e-12), 0.0, var)
    var = np.maximum(var, 0.0)
    if single:
        return float(mu[0]), float(var[0])
    return mu, var


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------

def log_marginal_likelihood(model: GpModel) -> float:
    resid = model.Y - model.mean_fn(model.X)
    n = model.n
    return float(-0.5 * (resid @ model.alpha) - np.sum(np.log(np.diag(model.L))) - 0.5 * n * math.log(2 * math.pi))


def lml_and_grad(X, Y, log_params) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in ``[log σ_f, log ℓ_1..ℓ_d, log σ_ε]``."""
    X = np.atleast_2d(X)
    Y = np.asarray(Y, dtype=float)
    n, d = X.shape
    p = np.asarray(log_params, dtype=float)
    sf2 = math.exp(2 * p[0])
    ls = np.exp(p[1:1 + d])
    noise_var = math.exp(2 * p[1 + d])
    a = X / ls
    sq = (a * a).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * a @ a.T, 0.0)
    K = sf2 * np.exp(-0.5 * d2)
    A = K + max(noise_var, JITTER_FLOOR) * np.eye(n)
    L = np.linalg.cholesky(A)
    alpha = cho_solve((L, True), Y)
    lml = -0.5 * Y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    Ainv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Ainv  # dlml/dθ = ½ tr(W dA/dθ)
    g = np.empty(len(p))
    g[0] = 0.5 * np.sum(W * (2 * K))
    for j in range(d):
        diff = (X[:, j:j + 1] - X[:, j:j + 1].T) / ls[j]
        g[1 + j] = 0.5 * np.sum(W * (K * diff * diff))
    g[1 + d] = np.trace(W) * noise_var if noise_var > JITTER_FLOOR else 0.0
    return float(lml), g


@dataclass(frozen=True)
class HyperBounds:
    """Box for the tuner, in natural (not log) units."""

    sigma_f: tuple = (1e-3, 1e3)
    lengthscale: tuple = (1e-3, 1e3)
    noise_std: tuple = (1e-6, 1e1)


@dataclass(frozen=True)
class TuneResult:
    kernel: SeKernel
    noise_std: float
    lml: float
    improved: bool


def _pack(kernel: SeKernel, noise_std: float) -> np.ndarray:
    return np.log(np.r_[kernel.sigma_f, kernel.lengthscales, max(noise_std, 1e-12)])


def tune_hyperparameters(X, Y, init: tuple[SeKernel, float], bounds: HyperBounds = HyperBounds(),
                         n_restarts: int = 8, seed: int = 0, max_iter: int = 200) -> TuneResult:
    """Maximise the log marginal likelihood from ``init`` plus ``n_restarts`` random starts."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    d = X.shape[1]
    kernel0, noise0 = init
    lo = np.log(np.r_[bounds.sigma_f[0], [bounds.lengthscale[0]] * d, bounds.noise_std[0]])
    hi = np.log(np.r_[bounds.sigma_f[1], [bounds.lengthscale[1]] * d, bounds.noise_std[1]])
    p0 = _pack(kernel0, noise0)
    if np.any(p0 < lo - 1e-12) or np.any(p0 > hi + 1e-12):
        raise ValueError("initial hyper-parameters lie outside the bounds")

    def neg(p):
        try:
            f, g = lml_and_grad(X, Y, p)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(p)
        return -f, -g

    f0 = -neg(p0)[0]
    rng = np.random.default_rng(seed)
    starts = [p0] + [rng.uniform(lo, hi) for _ in range(n_restarts)]
    best_p, best_f = p0, f0
    for s in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(neg, s, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                           options={"maxiter": max_iter})
        if np.isfinite(res.fun) and -res.fun > best_f:
            best_f, best_p = -float(res.fun), res.x
    improved = best_f > f0 + 1e-12
    if not improved:
        warnings.warn("hyper-parameter search did not improve on the initial guess", RuntimeWarning)
    e = np.exp(best_p)
    return TuneResult(SeKernel.from_lengthscales(e[0], e[1:1 + d]), float(e[1 + d]), float(best_f), improved)


# ---------------------------------------------------------------------------
# Lookup tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LookupTable:
    grids: tuple
    mean: np.ndarray
    std: np.ndarray
    max_error_mean: float = 0.0
    max_error_std: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        grids = tuple(np.asarray(g, dtype=float) for g in self.grids)
        object.__setattr__(self, "grids", grids)
        shape = tuple(len(g) for g in grids)
        for g in grids:
            if len(g) == 0:
                raise ValueError("empty grid dimension")
            if len(g) > 1 and np.any(np.diff(g) <= 0):
                raise ValueError("grid must be strictly increasing")
        if self.mean.shape != shape or self.std.shape != shape:
            raise ValueError(f"table shape {self.mean.shape} does not match grid sizes {shape}")

    @property
    def shape(self) -> tuple:
        return self.mean.shape

    def header(self) -> dict:
        return {
            "format": "quadflip-lut",
            "version": 1,
            "grids": [g.tolist() for g in self.grids],
            "shape": list(self.shape),
            "dtype": "float64-le",
            "max_error_mean": self.max_error_mean,
            "max_error_std": self.max_error_std,
            "interpolation": "multilinear",
            "meta": self.meta,
        }

    def save(self, path) -> None:
        """Binary layout: ``uint64`` header length, JSON header, mean block, std block (C order)."""
        hdr = json.dumps(self.header()).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(hdr)))
            fh.write(hdr)
            fh.write(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.std, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LookupTable":
        raw = Path(path).read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        hdr = json.loads(raw[8:8 + n])
        shape = tuple(hdr["shape"])
        size = int(np.prod(shape))
        body = np.frombuffer(raw[8 + n:], dtype="<f8")
        if body.size != 2 * size:
            raise ValueError("lookup table body size does not match its header")
        return cls(tuple(hdr["grids"]), body[:size].reshape(shape).copy(), body[size:].reshape(shape).copy(),
                   hdr["max_error_mean"], hdr["max_error_std"], hdr.get("meta", {}))

    def to_csv(self, path) -> None:
        mesh = np.meshgrid(*self.grids, indexing="ij")
        cols = [m.ravel() for m in mesh] + [self.mean.ravel(), self.std.ravel()]
        names = [f"x{i}" for i in range(len(self.grids))] + ["mean", "std"]
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names), comments="")


def _interp_weights(table: LookupTable, xs: np.ndarray):
    """Lower corner indices, fractional offsets and an out-of-range mask for a batch."""
    idx = []
    frac = []
    clamped = np.zeros(len(xs), dtype=bool)
    for j, g in enumerate(table.grids):
        x = xs[:, j]
        if len(g) == 1:
            idx.append(np.zeros(len(xs), dtype=np.intp))
            frac.append(np.zeros(len(xs)))
            clamped |= x != g[0]
            continue
        clamped |= (x < g[0]) | (x > g[-1])
        xc = np.clip(x, g[0], g[-1])
        i = np.clip(np.searchsorted(g, xc, side="right") - 1, 0, len(g) - 2)
        idx.append(i)
        frac.append((xc - g[i]) / (g[i + 1] - g[i]))
    return idx, frac, clamped


def _interp(values: np.ndarray, idx, frac) -> np.ndarray:
    out = np.zeros(len(idx[0]))
    for corner in itertools.product((0, 1), repeat=len(idx)):
        w = np.ones(len(idx[0]))
        ii = []
        for c, i, f in zip(corner, idx, frac):
            w = w * (f if c else 1.0 - f)
            ii.append(np.minimum(i + c, values.shape[len(ii)] - 1))
        out += w * values[tuple(ii)]
    return out


def table_eval(table: LookupTable, x_star, return_clamped: bool = False):
    """Multilinear interpolation of ``(mean, std)``; queries outside the grid are clamped."""
    xs = np.asarray(x_star, dtype=float)
    single = xs.ndim == 1
    xs = np.atleast_2d(xs)
    if xs.shape[1] != len(table.grids):
        raise ValueError("query dimension does not match the table")
    idx, frac, clamped = _interp_weights(table, xs)
    mu = _interp(table.mean, idx, frac)
    sd = _interp(table.std, idx, frac)
    if single:
        out = (float(mu[0]), float(sd[0]))
        return (*out, bool(clamped[0])) if return_clamped else out
    return (mu, sd, clamped) if return_clamped else (mu, sd)


def export_table(model: GpModel, grids: Sequence, n_check: int = 2000, seed: int = 0,
                 safety: float = 2.0, meta: Optional[dict] = None) -> LookupTable:
    """Evaluate ``model`` on the tensor grid and record an interpolation-error bound.

    The bound is the largest deviation from exact prediction over every cell
    centre plus ``n_check`` random interior points, multiplied by ``safety``.
    """
    grids = tuple(np.asarray(g, dtype=float) for g in grids)
    shape = tuple(len(g) for g in grids)
    if any(s == 0 for s in shape):
        raise ValueError("empty grid dimension")
    if int(np.prod(shape)) > 10 ** 6:
        raise ValueError("grid has more than 1e6 nodes")
    nodes = np.stack([m.ravel() for m in np.meshgrid(*grids, indexing="ij")], axis=1)
    mu, var = predict(model, nodes)
    table = LookupTable(grids, mu.reshape(shape), np.sqrt(var).reshape(shape), meta=dict(meta or {}))

    centres = [0.5 * (g[1:] + g[:-1]) if len(g) > 1 else g for g in grids]
    probe = np.stack([m.ravel() for m in np.meshgrid(*centres, indexing="ij")], axis=1)
    rng = np.random.default_rng(seed)
    lo = np.array([g[0] for g in grids])
    hi = np.array([g[-1] for g in grids])
    probe = np.vstack([probe, rng.uniform(lo, hi, size=(n_check, len(grids)))])
    mu_e, var_e = predict(model, probe)
    mu_t, sd_t = table_eval(table, probe)
    err_m = float(np.max(np.abs(mu_e - mu_t)))
    err_s = float(np.max(np.abs(np.sqrt(var_e) - sd_t)))
    return replace(table, max_error_mean=safety * err_m, max_error_std=safety * err_s)
