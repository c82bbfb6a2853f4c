"""Bounded-variable revised simplex on a sparse LU basis with an eta file.

Primal two-phase method (slack/artificial start) plus a dual simplex used
to warm-start re-solves after bound changes (branch-and-bound nodes).
Dantzig pricing with a Bland's-rule fallback after stall detection.  The
constraint matrix lives in CSC form; basis solves go through a sparse LU
refreshed every ~120 pivots, with product-form eta updates in between.
"""
from __future__ import annotations

import math
import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..formulation import EQ, GE, LE, FrozenModelData, Model
from . import LpResult, NumericError, SolveOptions

BASIC, AT_LO, AT_UP, FREE = 0, 1, 2, 3

_PIV_TOL = 1e-9
_STALL_ITERS = 60
_REFRESH_ETAS = 120


class _Basis:
    """LU-factored basis with eta updates: B^{-1} = E_k ... E_1 LU^{-1}."""

    def __init__(self, tableau, basic):
        self.tab = tableau
        self.rebuild(basic)

    def rebuild(self, basic):
        if len(basic) == 0:
            self.lu = None
            self.etas = []
            return
        B = self.tab.basis_matrix(basic)
        try:
            self.lu = spla.splu(B.tocsc())
        except RuntimeError as exc:
            raise NumericError("singular basis") from exc
        self.etas: list[tuple[int, np.ndarray, float]] = []

    def ftran(self, v: np.ndarray) -> np.ndarray:
        if self.lu is None:
            return v.copy()
        x = self.lu.solve(v)
        for r, w, wr in self.etas:
            xr = x[r]
            if xr != 0.0:
                x -= (xr / wr) * w
                x[r] = xr / wr
        return x

    def btran(self, v: np.ndarray) -> np.ndarray:
        # E^T changes only component r: v_r <- (v_r - w.v) / w_r (w has w_r zeroed)
        if self.lu is None:
            return v.copy()
        x = v.copy()
        for r, w, wr in reversed(self.etas):
            x[r] = (x[r] - w @ x) / wr
        return self.lu.solve(x, trans="T")

    def push(self, r: int, w: np.ndarray):
        wr = w[r]
        if abs(wr) < _PIV_TOL:
            raise NumericError("tiny pivot", row=r)
        w2 = w.copy()
        w2[r] = 0.0
        self.etas.append((r, w2, wr))

    @property
    def needs_refresh(self) -> bool:
        return len(self.etas) > _REFRESH_ETAS


class _Tableau:
    """Computational form: A x + s = b with slack s per row, artificials for
    phase 1.  Column layout: [structural | slack | artificial]."""

    def __init__(self, data: FrozenModelData, options: SolveOptions):
        self.opt = options
        self.n = data.n
        self.m = data.m
        m, n = self.m, self.n
        rows, cols, vals = [], [], []
        for i, (rc, rv) in enumerate(zip(data.row_cols, data.row_vals)):
            rows.extend([i] * len(rc))
            cols.extend(rc.tolist())
            vals.extend(rv.tolist())
        self.A = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
        self.AT = self.A.T.tocsr()
        self.b = data.rhs.copy()
        self.senses = list(data.senses)
        N = n + 2 * m
        self.lo = np.full(N, -math.inf)
        self.hi = np.full(N, math.inf)
        self.lo[:n] = data.lo
        self.hi[:n] = data.hi
        for i, s in enumerate(self.senses):
            j = n + i
            if s == LE:
                self.lo[j], self.hi[j] = 0.0, math.inf
            elif s == GE:
                self.lo[j], self.hi[j] = -math.inf, 0.0
            else:
                self.lo[j], self.hi[j] = 0.0, 0.0
        self.lo[n + m:] = 0.0
        self.hi[n + m:] = 0.0
        self.art_sign = np.ones(m)
        self.c = np.zeros(N)
        self.c_phase2 = np.zeros(N)
        self.c_phase2[:n] = -data.obj  # internal minimization
        self.obj_constant = data.obj_constant

        self.status_of = np.full(N, AT_LO, dtype=np.int8)
        self.x = np.zeros(N)
        self.basic = np.arange(n, n + m)
        self.basis: _Basis | None = None
        self.iterations = 0
        self.deadline = time.monotonic() + options.time_limit

    # -- columns ---------------------------------------------------------
    def column(self, j: int) -> np.ndarray:
        n, m = self.n, self.m
        col = np.zeros(m)
        if j < n:
            sl = slice(self.A.indptr[j], self.A.indptr[j + 1])
            col[self.A.indices[sl]] = self.A.data[sl]
        elif j < n + m:
            col[j - n] = 1.0
        else:
            col[j - n - m] = self.art_sign[j - n - m]
        return col

    def basis_matrix(self, basic) -> sp.coo_matrix:
        n, m = self.n, self.m
        rows, cols, vals = [], [], []
        for k, j in enumerate(basic):
            if j < n:
                sl = slice(self.A.indptr[j], self.A.indptr[j + 1])
                idx = self.A.indices[sl]
                rows.extend(idx.tolist())
                cols.extend([k] * len(idx))
                vals.extend(self.A.data[sl].tolist())
            elif j < n + m:
                rows.append(j - n)
                cols.append(k)
                vals.append(1.0)
            else:
                rows.append(j - n - m)
                cols.append(k)
                vals.append(self.art_sign[j - n - m])
        return sp.coo_matrix((vals, (rows, cols)), shape=(m, m))

    def refactor(self):
        self.basis.rebuild(self.basic)
        self.recompute_basics()

    def recompute_basics(self):
        xn = self.x.copy()
        xn[self.basic] = 0.0
        rhs = self.b - self.A @ xn[: self.n]
        rhs -= xn[self.n: self.n + self.m]
        rhs -= self.art_sign * xn[self.n + self.m:]
        self.x[self.basic] = self.basis.ftran(rhs)

    def reset_nonbasic_values(self):
        for j in range(len(self.x)):
            st = self.status_of[j]
            if st == AT_LO:
                if math.isfinite(self.lo[j]):
                    self.x[j] = self.lo[j]
                else:
                    self.status_of[j] = FREE
                    self.x[j] = 0.0
            elif st == AT_UP:
                if math.isfinite(self.hi[j]):
                    self.x[j] = self.hi[j]
                else:
                    self.status_of[j] = FREE
                    self.x[j] = 0.0
            elif st == FREE:
                self.x[j] = 0.0

    # -- pricing -----------------------------------------------------------
    def duals(self) -> np.ndarray:
        return self.basis.btran(self.c[self.basic])

    def reduced_costs(self, y: np.ndarray | None = None) -> np.ndarray:
        n, m = self.n, self.m
        if y is None:
            y = self.duals()
        d = np.empty(n + 2 * m)
        d[:n] = self.c[:n] - self.AT @ y
        d[n: n + m] = self.c[n: n + m] - y
        d[n + m:] = self.c[n + m:] - self.art_sign * y
        return d

    def entering_candidates(self, d: np.ndarray) -> np.ndarray:
        tol = self.opt.opt_tol
        movable = (self.hi - self.lo) > 0
        nb_lo = (self.status_of == AT_LO) & movable & (d < -tol)
        nb_up = (self.status_of == AT_UP) & movable & (d > tol)
        nb_free = (self.status_of == FREE) & (np.abs(d) > tol)
        return np.flatnonzero(nb_lo | nb_up | nb_free)

    # -- pivoting ------------------------------------------------------------
    def primal_step(self, j: int, d_j: float) -> str:
        st = self.status_of[j]
        if st == AT_UP:
            t_dir = -1.0
        elif st == AT_LO:
            t_dir = 1.0
        else:
            t_dir = 1.0 if d_j < 0 else -1.0
        w = self.basis.ftran(self.column(j))
        delta = t_dir * w
        xB = self.x[self.basic]
        loB = self.lo[self.basic]
        hiB = self.hi[self.basic]

        with np.errstate(divide="ignore", invalid="ignore"):
            up_room = np.where(delta > _PIV_TOL, (xB - loB) / delta, math.inf)
            dn_room = np.where(delta < -_PIV_TOL, (xB - hiB) / delta, math.inf)
        ratios = np.minimum(up_room, dn_room)
        ratios = np.where(np.isnan(ratios), math.inf, np.maximum(ratios, 0.0))
        if len(ratios):
            r = int(np.argmin(ratios))
            theta_basic = float(ratios[r])
        else:
            r = -1
            theta_basic = math.inf
        theta_self = self.hi[j] - self.lo[j]
        theta = min(theta_basic, theta_self)
        if not math.isfinite(theta):
            return "unbounded"

        self.x[self.basic] -= theta * delta
        self.x[j] += t_dir * theta
        if theta_self <= theta_basic:
            self.status_of[j] = AT_UP if t_dir > 0 else AT_LO
            return "flip"
        leaving = self.basic[r]
        if delta[r] > 0:
            self.status_of[leaving] = AT_LO
            self.x[leaving] = self.lo[leaving]
        else:
            self.status_of[leaving] = AT_UP
            self.x[leaving] = self.hi[leaving]
        self.basic[r] = j
        self.status_of[j] = BASIC
        self.basis.push(r, w)
        if self.basis.needs_refresh:
            self.refactor()
        return "pivot"

    def run_primal(self, max_iters: int) -> str:
        bland = False
        stall = 0
        last_obj = math.inf
        while True:
            if self.iterations >= max_iters:
                return "iteration_limit"
            if time.monotonic() > self.deadline:
                return "time_limit"
            d = self.reduced_costs()
            cand = self.entering_candidates(d)
            if cand.size == 0:
                return "optimal"
            if bland:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            out = self.primal_step(j, d[j])
            self.iterations += 1
            if out == "unbounded":
                return "unbounded"
            obj = float(self.c @ self.x)
            if obj < last_obj - 1e-11:
                stall = 0
                bland = False
            else:
                stall += 1
                if stall > _STALL_ITERS:
                    bland = True
            last_obj = obj

    # -- phases ----------------------------------------------------------------
    def phase1(self, max_iters: int) -> str:
        n, m = self.n, self.m
        self.status_of[:] = AT_LO
        for j in range(n):
            if math.isfinite(self.lo[j]):
                self.x[j] = self.lo[j]
            elif math.isfinite(self.hi[j]):
                self.status_of[j] = AT_UP
                self.x[j] = self.hi[j]
            else:
                self.status_of[j] = FREE
                self.x[j] = 0.0
        self.x[n:] = 0.0
        resid = self.b - self.A @ self.x[:n]
        self.c[:] = 0.0
        basic = np.empty(m, dtype=int)
        needs_art = False
        for i in range(m):
            slo, shi = self.lo[n + i], self.hi[n + i]
            if slo - self.opt.feas_tol <= resid[i] <= shi + self.opt.feas_tol:
                basic[i] = n + i
                self.x[n + i] = resid[i]
                self.status_of[n + i] = BASIC
            else:
                needs_art = True
                if resid[i] > shi:
                    self.x[n + i] = shi
                    self.status_of[n + i] = AT_UP
                    gap = resid[i] - shi
                else:
                    self.x[n + i] = slo
                    self.status_of[n + i] = AT_LO
                    gap = resid[i] - slo
                self.art_sign[i] = 1.0 if gap > 0 else -1.0
                j_art = n + m + i
                basic[i] = j_art
                self.x[j_art] = abs(gap)
                self.status_of[j_art] = BASIC
                self.lo[j_art], self.hi[j_art] = 0.0, math.inf
                self.c[j_art] = 1.0
        self.basic = basic
        self.basis = _Basis(self, self.basic)
        if not needs_art:
            return "optimal"
        out = self.run_primal(max_iters)
        if out != "optimal":
            return out
        infeas = float(self.c @ self.x)
        scale = max(1.0, float(np.abs(self.b).max(initial=0.0)))
        if infeas > 1e-6 * scale:
            return "infeasible"
        self.lo[n + m:] = 0.0
        self.hi[n + m:] = 0.0
        return "optimal"

    def phase2(self, max_iters: int) -> str:
        self.c[:] = self.c_phase2
        return self.run_primal(max_iters)

    # -- dual simplex ------------------------------------------------------
    def run_dual(self, max_iters: int) -> str:
        n, m = self.n, self.m
        self.c[:] = self.c_phase2
        tol = self.opt.feas_tol
        iters = 0
        while True:
            if iters >= max_iters:
                return "iteration_limit"
            if time.monotonic() > self.deadline:
                return "time_limit"
            xB = self.x[self.basic]
            viol_lo = self.lo[self.basic] - xB
            viol_hi = xB - self.hi[self.basic]
            worst = np.maximum(viol_lo, viol_hi)
            r = int(np.argmax(worst))
            if worst[r] <= tol:
                return "optimal"
            below = viol_lo[r] > viol_hi[r]
            e_r = np.zeros(m)
            e_r[r] = 1.0
            eta = self.basis.btran(e_r)
            alpha = np.empty(n + 2 * m)
            alpha[:n] = self.AT @ eta
            alpha[n: n + m] = eta
            alpha[n + m:] = eta * self.art_sign
            d = self.reduced_costs()
            movable = (self.hi - self.lo) > 0
            if below:
                ok_lo = (self.status_of == AT_LO) & movable & (alpha < -_PIV_TOL)
                ok_up = (self.status_of == AT_UP) & movable & (alpha > _PIV_TOL)
            else:
                ok_lo = (self.status_of == AT_LO) & movable & (alpha > _PIV_TOL)
                ok_up = (self.status_of == AT_UP) & movable & (alpha < -_PIV_TOL)
            ok_free = (self.status_of == FREE) & (np.abs(alpha) > _PIV_TOL)
            cand = np.flatnonzero(ok_lo | ok_up | ok_free)
            if cand.size == 0:
                return "infeasible"
            ratios = np.abs(d[cand] / alpha[cand])
            j = int(cand[np.argmin(ratios)])
            target = self.lo[self.basic[r]] if below else self.hi[self.basic[r]]
            w = self.basis.ftran(self.column(j))
            if self.status_of[j] == AT_LO:
                t_dir = 1.0
            elif self.status_of[j] == AT_UP:
                t_dir = -1.0
            else:
                t_dir = 1.0 if (below ^ (alpha[j] > 0)) else -1.0
            denom = t_dir * w[r]
            if abs(denom) < _PIV_TOL:
                return "stall"
            theta = (self.x[self.basic[r]] - target) / denom
            if theta < 0:
                theta = 0.0
            leaving = self.basic[r]
            self.x[self.basic] -= theta * (t_dir * w)
            self.x[j] += t_dir * theta
            self.x[leaving] = target
            self.status_of[leaving] = AT_LO if below else AT_UP
            self.basic[r] = j
            self.status_of[j] = BASIC
            self.basis.push(r, w)
            if self.basis.needs_refresh:
                self.refactor()
            iters += 1
            self.iterations += 1

    # -- snapshots ---------------------------------------------------------
    def snapshot(self):
        return self.basic.copy(), self.status_of.copy(), self.art_sign.copy()

    def load_snapshot(self, snap):
        self.basic = snap[0].copy()
        self.status_of = snap[1].copy()
        self.art_sign = snap[2].copy()
        self.reset_nonbasic_values()
        self.basis = _Basis(self, self.basic)
        self.recompute_basics()

    def objective_value(self) -> float:
        return float(-(self.c_phase2 @ self.x) + self.obj_constant)


def _freeze(model) -> FrozenModelData:
    if isinstance(model, Model):
        return model.freeze()
    return model


def solve_lp(model, options: SolveOptions | None = None,
             integrality_ignored: bool = True) -> LpResult:
    """Solve the LP relaxation of a model (integrality ignored)."""
    data = _freeze(model)
    options = options or SolveOptions()
    tab = _Tableau(data, options)
    max_iters = 20 * (tab.n + tab.m) + 500
    out = tab.phase1(max_iters)
    if out == "infeasible":
        return LpResult("infeasible", None, None, tab.iterations)
    if out in ("iteration_limit", "time_limit"):
        return LpResult(out, None, None, tab.iterations)
    out = tab.phase2(max_iters)
    if out == "unbounded":
        return LpResult("unbounded", None, None, tab.iterations)
    if out in ("iteration_limit", "time_limit"):
        return LpResult(out, None, None, tab.iterations)
    return LpResult("optimal", tab.objective_value(), tab.x[: tab.n].copy(),
                    tab.iterations, basis=tab.snapshot())


def resolve_with_bounds(data: FrozenModelData, options: SolveOptions,
                        basis, lo: np.ndarray, hi: np.ndarray) -> LpResult:
    """Re-solve after changing structural bounds, warm-started from a basis
    snapshot via the dual simplex; falls back to a cold solve on trouble."""
    tab = _Tableau(data, options)
    tab.lo[: tab.n] = lo
    tab.hi[: tab.n] = hi
    cold = None
    if basis is not None:
        try:
            tab.load_snapshot(basis)
            out = tab.run_dual(5 * (tab.n + tab.m) + 200)
            if out == "optimal":
                out2 = tab.run_primal(20 * (tab.n + tab.m) + 500)
                if out2 == "optimal":
                    return LpResult("optimal", tab.objective_value(),
                                    tab.x[: tab.n].copy(), tab.iterations,
                                    basis=tab.snapshot())
                cold = out2
            elif out == "infeasible":
                return LpResult("infeasible", None, None, tab.iterations)
            else:
                cold = out
        except NumericError:
            cold = "numeric"
    if cold == "time_limit":
        return LpResult("time_limit", None, None, tab.iterations)
    patched = FrozenModelData(
        n=data.n, lo=lo, hi=hi, is_binary=data.is_binary, names=data.names,
        row_cols=data.row_cols, row_vals=data.row_vals, senses=data.senses,
        rhs=data.rhs, obj=data.obj, obj_constant=data.obj_constant)
    return solve_lp(patched, options)
