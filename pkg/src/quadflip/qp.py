"""Dense convex QP solver (Mehrotra predictor-corrector interior point).

Solves

    min ½ uᵀHu + gᵀu   s.t.   lo ≤ C u ≤ hi,   A u = b

with ``H`` positive semidefinite. Rows with an infinite bound on one side are
one-sided. Rows are scaled to unit ∞-norm internally, and the reported KKT
residual refers to the original problem.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve


class QpInfeasibleError(RuntimeError):
    def __init__(self, row: int, violation: float):
        super().__init__(f"QP is infeasible: constraint row {row} violated by at least {violation:.3g}")
        self.row = row
        self.violation = violation


class QpNotConvergedError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"QP did not converge in {iterations} iterations (KKT residual {residual:.3g})")
        self.iterations = iterations
        self.residual = residual


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    C: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        n = len(self.g)
        if self.H.shape != (n, n):
            raise ValueError("H and g dimensions disagree")
        if self.C is None:
            self.C = np.zeros((0, n))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float)).reshape(-1, n)
        m = self.C.shape[0]
        self.lo = np.full(m, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).reshape(m)
        self.hi = np.full(m, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).reshape(m)
        if np.any(self.lo > self.hi):
            i = int(np.argmax(self.lo - self.hi))
            raise QpInfeasibleError(i, float(self.lo[i] - self.hi[i]))
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(self.A.shape[0])

    @property
    def n(self) -> int:
        return len(self.g)

    def objective(self, u) -> float:
        return float(0.5 * u @ self.H @ u + self.g @ u)

    def violation(self, u) -> np.ndarray:
        """Per-row constraint violation (zero when satisfied)."""
        Cu = self.C @ u
        return np.maximum(np.maximum(Cu - self.hi, self.lo - Cu), 0.0)


@dataclass
class QpResult:
    u: np.ndarray
    z: np.ndarray            # multipliers of the two-sided rows (positive: upper bound active)
    nu: np.ndarray           # equality multipliers
    objective: float
    kkt_residual: float
    iterations: int


def kkt_residual(p: QpProblem, u, z, nu) -> float:
    """max of stationarity, primal infeasibility, sign and complementarity errors (∞-norms)."""
    stat = p.H @ u + p.g + p.C.T @ z + p.A.T @ nu
    Cu = p.C @ u
    prim = max(float(np.max(p.violation(u), initial=0.0)),
               float(np.max(np.abs(p.A @ u - p.b), initial=0.0)))
    zu, zl = np.maximum(z, 0.0), np.maximum(-z, 0.0)
    # a positive multiplier needs a finite upper bound, a negative one a finite lower bound
    sign = float(np.max(np.r_[zu[~np.isfinite(p.hi)], zl[~np.isfinite(p.lo)]], initial=0.0))
    with np.errstate(invalid="ignore"):
        cu = np.where(zu > 0, zu * np.abs(p.hi - Cu), 0.0)
        cl = np.where(zl > 0, zl * np.abs(Cu - p.lo), 0.0)
    comp = float(np.max(np.r_[cu, cl], initial=0.0))
    return max(float(np.max(np.abs(stat), initial=0.0)), prim, sign, comp)


def _max_step(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-x[neg] / dx[neg])))


def _ipm(H, g, C, lo, hi, A, b, tol: float, max_iter: int):
    n = len(g)
    me = A.shape[0]
    fu = np.isfinite(hi)
    fl = np.isfinite(lo)
    hi_ = np.where(fu, hi, 0.0)
    lo_ = np.where(fl, lo, 0.0)
    u = np.zeros(n)
    Cu = C @ u
    su = np.where(fu, np.maximum(hi_ - Cu, 1.0), 1.0)
    sl = np.where(fl, np.maximum(Cu - lo_, 1.0), 1.0)
    zu = fu.astype(float)
    zl = fl.astype(float)
    nu = np.zeros(me)
    n_comp = max(int(fu.sum() + fl.sum()), 1)
    scale = 1.0 + max(np.max(np.abs(g), initial=0.0), np.max(np.abs(H), initial=0.0))
    it = 0
    for it in range(1, max_iter + 1):
        Cu = C @ u
        rd = H @ u + g + C.T @ (zu - zl) + A.T @ nu
        rpu = np.where(fu, Cu + su - hi_, 0.0)
        rpl = np.where(fl, -Cu + sl + lo_, 0.0)
        re = A @ u - b
        mu = (su @ zu + sl @ zl) / n_comp
        res = max(np.max(np.abs(rd), initial=0) / scale, np.max(np.abs(rpu), initial=0),
                  np.max(np.abs(rpl), initial=0), np.max(np.abs(re), initial=0))
        if res < tol and mu < tol:
            return u, zu - zl, nu, it, True
        if not (np.isfinite(res) and np.isfinite(mu)) or np.any(su <= 0) or np.any(sl <= 0) or mu > 1e30:
            break
        Du = zu / su
        Dl = zl / sl
        M = H + (C.T * (Du + Dl)) @ C
        K = np.block([[M, A.T], [A, np.zeros((me, me))]]) if me else M
        K = K + 1e-14 * np.eye(len(K)) * (1.0 + np.max(np.abs(np.diag(M)), initial=0.0))
        lu = lu_factor(K, check_finite=False)

        def direction(rcu, rcl):
            tu = (-rcu + zu * rpu) / su
            tl = (-rcl + zl * rpl) / sl
            rhs = -rd - C.T @ (tu - tl)
            sol = lu_solve(lu, np.r_[rhs, -re], check_finite=False)
            du, dnu = sol[:n], sol[n:]
            Cdu = C @ du
            dzu = np.where(fu, tu + Du * Cdu, 0.0)
            dzl = np.where(fl, tl - Dl * Cdu, 0.0)
            dsu = np.where(fu, -rpu - Cdu, 0.0)
            dsl = np.where(fl, -rpl + Cdu, 0.0)
            return du, dnu, dsu, dsl, dzu, dzl

        # predictor
        d_aff = direction(su * zu, sl * zl)
        _, _, dsu, dsl, dzu, dzl = d_aff
        ap = min(_max_step(su, dsu), _max_step(sl, dsl))
        ad = min(_max_step(zu, dzu), _max_step(zl, dzl))
        mu_aff = ((su + ap * dsu) @ (zu + ad * dzu) + (sl + ap * dsl) @ (zl + ad * dzl)) / n_comp
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rcu = np.where(fu, su * zu + dsu * dzu - sigma * mu, 0.0)
        rcl = np.where(fl, sl * zl + dsl * dzl - sigma * mu, 0.0)
        du, dnu, dsu, dsl, dzu, dzl = direction(rcu, rcl)
        ap = 0.995 * min(_max_step(su, dsu), _max_step(sl, dsl)) if n_comp else 1.0
        ad = 0.995 * min(_max_step(zu, dzu), _max_step(zl, dzl)) if n_comp else 1.0
        ap, ad = min(ap, 1.0), min(ad, 1.0)
        u = u + ap * du
        su = np.where(fu, su + ap * dsu, 1.0)
        sl = np.where(fl, sl + ap * dsl, 1.0)
        zu = np.where(fu, zu + ad * dzu, 0.0)
        zl = np.where(fl, zl + ad * dzl, 0.0)
        nu = nu + ad * dnu
    return u, zu - zl, nu, it, False


def _phase1(C, lo, hi, A, b, max_iter: int):
    """Minimise the uniform constraint relaxation ``t ≥ 0``; returns (t*, u)."""
    n = C.shape[1]
    # lo - t ≤ Cu  and  Cu ≤ hi + t, split into two one-sided row blocks
    up = np.isfinite(hi)
    dn = np.isfinite(lo)
    rows, rlo, rhi = [], [], []
    if np.any(up):
        R = np.hstack([C[up], -np.ones((up.sum(), 1))])
        rows.append(R); rlo.append(np.full(up.sum(), -np.inf)); rhi.append(hi[up])
    if np.any(dn):
        R = np.hstack([C[dn], np.ones((dn.sum(), 1))])
        rows.append(R); rlo.append(lo[dn]); rhi.append(np.full(dn.sum(), np.inf))
    tb = np.zeros((1, n + 1)); tb[0, -1] = 1.0
    rows.append(tb); rlo.append(np.array([0.0])); rhi.append(np.array([np.inf]))
    CC = np.vstack(rows)
    g = np.zeros(n + 1); g[-1] = 1.0
    H = 1e-10 * np.eye(n + 1)
    AA = np.hstack([A, np.zeros((A.shape[0], 1))])
    u, _, _, _, _ = _ipm(H, g, CC, np.concatenate(rlo), np.concatenate(rhi), AA, b, 1e-10, max_iter)
    return float(u[-1]), u[:n]


def solve_qp(p: QpProblem, tol: float = 1e-10, max_iter: int = 200, check_tol: float = 1e-6) -> QpResult:
    """Solve ``p``; raises :class:`QpInfeasibleError` or :class:`QpNotConvergedError` on failure."""
    C = p.C
    norms = np.max(np.abs(C), axis=1) if C.shape[0] else np.zeros(0)
    norms = np.where(norms > 0, norms, 1.0)
    Cs = C / norms[:, None]
    lo_s, hi_s = p.lo / norms, p.hi / norms
    if C.shape[0]:
        empty = np.all(C == 0, axis=1)
        bad = empty & ((p.lo > 0) | (p.hi < 0))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise QpInfeasibleError(i, float(max(p.lo[i], -p.hi[i])))
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        u, zs, nu, it, ok = _ipm(p.H, p.g, Cs, lo_s, hi_s, p.A, p.b, tol, max_iter)
    z = zs / norms
    res = kkt_residual(p, u, z, nu) if ok else float("inf")
    if not ok or res > check_tol:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            t, u1 = _phase1(Cs, lo_s, hi_s, p.A, p.b, max_iter)
        if t > 1e-7:
            viol = p.violation(u1)
            i = int(np.argmax(viol))
            raise QpInfeasibleError(i, float(viol[i]))
        raise QpNotConvergedError(it, res)
    return QpResult(u=u, z=z, nu=nu, objective=p.objective(u), kkt_residual=res, iterations=it)
