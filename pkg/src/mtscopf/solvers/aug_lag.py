"""Augmented-Lagrangian NLP engine with damped projected-Newton inner steps.

Consumes the sparse callback contract: objective/gradient, equality
constraints, Jacobian and Lagrangian Hessian in coordinate format with
fixed structure.  The Hessian callback evaluates sigma*grad2(f) +
sum_i lam_i*grad2(c_i) on the lower triangle.  Simple bounds are handled
by projection; the best iterate is returned when the time limit hits.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import NlpResult, SolveOptions, SolverError


@dataclass
class SimpleNlp:
    """Callable-backed problem for tests and simple models."""
    n: int
    m: int
    x_lo: np.ndarray
    x_hi: np.ndarray
    sense: str = "min"
    objective_fn: object = None
    gradient_fn: object = None
    constraints_fn: object = None
    jac_struct: tuple = ((), ())
    jacobian_fn: object = None
    hess_struct: tuple = ((), ())
    hessian_fn: object = None
    x0: np.ndarray | None = None

    def objective(self, x):
        return self.objective_fn(x)

    def gradient(self, x):
        return self.gradient_fn(x)

    def constraints(self, x):
        if self.m == 0:
            return np.zeros(0)
        return self.constraints_fn(x)

    def jac_structure(self):
        return self.jac_struct

    def jacobian(self, x):
        if self.m == 0:
            return np.zeros(0)
        return self.jacobian_fn(x)

    def hess_structure(self):
        return self.hess_struct

    def hessian(self, x, sigma, lam):
        return self.hessian_fn(x, sigma, lam)


def _dense_jacobian(problem, x) -> np.ndarray:
    rows, cols = problem.jac_structure()
    J = np.zeros((problem.m, problem.n))
    if len(rows):
        np.add.at(J, (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)),
                  problem.jacobian(x))
    return J


def _dense_hessian(problem, x, sigma, lam) -> np.ndarray:
    rows, cols = problem.hess_structure()
    H = np.zeros((problem.n, problem.n))
    if len(rows):
        r = np.asarray(rows, dtype=int)
        c = np.asarray(cols, dtype=int)
        v = np.asarray(problem.hessian(x, sigma, lam), dtype=float)
        np.add.at(H, (r, c), v)
        off = r != c
        np.add.at(H, (c[off], r[off]), v[off])
    return H


def _check_finite(name, arr):
    arr = np.atleast_1d(np.asarray(arr, dtype=float))
    if not np.all(np.isfinite(arr)):
        idx = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise SolverError(f"non-finite value from {name} callback at index {idx}")
    return arr


def solve_nlp(problem, options: SolveOptions | None = None,
              x0: np.ndarray | None = None) -> NlpResult:
    """Solve min/max f(x) s.t. c(x) = 0, lo <= x <= hi."""
    options = options or SolveOptions()
    deadline = time.monotonic() + options.time_limit
    n, m = problem.n, problem.m
    lo = np.asarray(problem.x_lo, dtype=float)
    hi = np.asarray(problem.x_hi, dtype=float)
    sgn = -1.0 if getattr(problem, "sense", "min") == "max" else 1.0

    if x0 is None:
        x0 = getattr(problem, "x0", None)
    if x0 is None:
        base = np.where(np.isfinite(lo), lo, 0.0)
        base = np.where(np.isfinite(hi) & ~np.isfinite(lo), hi, base)
        x0 = base
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)

    mu = 10.0
    lam = np.zeros(m)
    eta = 0.1
    omega = 1e-2
    total_iters = 0
    fixed = lo == hi

    def aug_value(xv, cv):
        f = sgn * float(problem.objective(xv))
        if m:
            return f + lam @ cv + 0.5 * mu * (cv @ cv)
        return f

    def aug_grad(xv, cv, J):
        g = sgn * _check_finite("gradient", problem.gradient(xv))
        if m:
            g = g + J.T @ (lam + mu * cv)
        return g

    def proj_grad_norm(xv, g):
        step = np.clip(xv - g, lo, hi) - xv
        return float(np.abs(step).max(initial=0.0))

    best = None

    for outer in range(60):
        # inner: projected damped Newton on the augmented Lagrangian
        for inner in range(120):
            if time.monotonic() > deadline:
                status = "time_limit"
                c = problem.constraints(x) if m else np.zeros(0)
                return NlpResult(status, x, float(problem.objective(x)),
                                 float(np.abs(c).max(initial=0.0)), total_iters,
                                 proj_grad_norm(x, aug_grad(x, c, _dense_jacobian(problem, x))))
            c = _check_finite("constraints", problem.constraints(x)) if m else np.zeros(0)
            J = _dense_jacobian(problem, x) if m else np.zeros((0, n))
            g = aug_grad(x, c, J)
            pg = proj_grad_norm(x, g)
            if pg <= omega:
                break
            H = _dense_hessian(problem, x, sgn, lam + mu * c if m else np.zeros(0))
            if m:
                H = H + mu * (J.T @ J)
            active = ((x <= lo + 1e-11) & (g > 0)) | ((x >= hi - 1e-11) & (g < 0)) | fixed
            free = ~active
            d = np.zeros(n)
            if np.any(free):
                Hff = H[np.ix_(free, free)]
                gf = g[free]
                tau = 0.0
                scale = max(1.0, float(np.abs(np.diag(Hff)).max(initial=1.0)))
                for _ in range(30):
                    try:
                        df = np.linalg.solve(Hff + tau * scale * np.eye(Hff.shape[0]), -gf)
                    except np.linalg.LinAlgError:
                        tau = max(1e-8, 10.0 * tau) if tau else 1e-8
                        continue
                    if gf @ df < -1e-14 * max(1.0, float(gf @ gf)):
                        break
                    tau = max(1e-8, 10.0 * tau) if tau else 1e-8
                else:
                    df = -gf
                d[free] = df
            else:
                break
            base_val = aug_value(x, c)
            slope = float(g @ d)
            alpha = 1.0
            accepted = False
            for _ in range(40):
                x_try = np.clip(x + alpha * d, lo, hi)
                c_try = problem.constraints(x_try) if m else np.zeros(0)
                val = aug_value(x_try, c_try)
                if val <= base_val + 1e-4 * alpha * min(slope, 0.0) + 1e-14 * abs(base_val):
                    if val < base_val or not np.array_equal(x_try, x):
                        x = x_try
                        accepted = True
                    break
                alpha *= 0.5
            total_iters += 1
            if not accepted:
                break

        c = problem.constraints(x) if m else np.zeros(0)
        resid = float(np.abs(c).max(initial=0.0))
        J = _dense_jacobian(problem, x) if m else np.zeros((0, n))
        g_orig = sgn * np.asarray(problem.gradient(x), dtype=float)
        if m:
            g_orig = g_orig + J.T @ lam
        stat = proj_grad_norm(x, g_orig)
        best = (x.copy(), resid, stat)
        if resid <= options.feas_tol and stat <= max(options.opt_tol, omega):
            if omega <= options.opt_tol:
                return NlpResult("converged", x, float(problem.objective(x)),
                                 resid, total_iters, stat)
            omega = max(0.1 * options.opt_tol, 0.1 * omega)
            continue
        if resid <= max(eta, options.feas_tol):
            lam = lam + mu * c
            eta = max(0.5 * options.feas_tol, eta * 0.2)
            omega = max(0.1 * options.opt_tol, omega * 0.2)
        else:
            mu = min(mu * 10.0, 1e10)
            omega = max(0.1 * options.opt_tol, omega * 0.5)

    x, resid, stat = best
    return NlpResult("max_iter", x, float(problem.objective(x)), resid, total_iters, stat)
