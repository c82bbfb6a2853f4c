"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own solver/evaluation code paths:
a dense big-M tableau simplex, interval reachability for ramp
trajectories, and a from-scratch DC power flow for outage re-solves.
"""
from __future__ import annotations

import itertools

import numpy as np

BIG_M = 1e7


def tableau_simplex_max(c, A, b, ub):
    """max c.x  s.t. A x <= b, 0 <= x <= ub, everything finite and dense.

    Textbook big-M tableau with Bland's rule.  Returns (status, objective).
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n = len(c)
    rows = np.vstack([A, np.eye(n)])
    rhs = np.concatenate([b, ub])
    m = len(rhs)
    # A x + s = rhs with s >= 0; flip rows with negative rhs and add artificials
    slack = np.eye(m)
    flip = rhs < 0
    rows[flip] *= -1.0
    rhs = np.abs(rhs)
    slack[flip, flip] = -1.0
    art_cols = np.flatnonzero(flip)
    n_art = len(art_cols)
    art = np.zeros((m, n_art))
    for k, i in enumerate(art_cols):
        art[i, k] = 1.0
    T = np.hstack([rows, slack, art, rhs[:, None]])
    cost = np.concatenate([-c, np.zeros(m), np.full(n_art, BIG_M), [0.0]])
    basis = []
    for i in range(m):
        if i in art_cols:
            basis.append(n + m + list(art_cols).index(i))
        else:
            basis.append(n + i)
    for _ in range(20000):
        cb = cost[basis]
        red = cost[:-1] - cb @ T[:, :-1]
        enter = -1
        for j in range(len(red)):
            if red[j] < -1e-9:
                enter = j
                break
        if enter < 0:
            x_full = np.zeros(T.shape[1] - 1)
            for i, bi in enumerate(basis):
                x_full[bi] = T[i, -1]
            if n_art and np.any(x_full[n + m:] > 1e-6):
                return "infeasible", None
            return "optimal", float(c @ x_full[:n])
        col = T[:, enter]
        ratios = np.where(col > 1e-9, T[:, -1] / np.where(col > 1e-9, col, 1.0), np.inf)
        if not np.any(np.isfinite(ratios)):
            return "unbounded", None
        leave = -1
        best = np.inf
        for i in range(m):
            if not np.isfinite(ratios[i]):
                continue
            if ratios[i] < best - 1e-12 or (abs(ratios[i] - best) <= 1e-12
                                            and (leave < 0 or basis[i] < basis[leave])):
                best = ratios[i]
                leave = i
        piv = T[leave, enter]
        T[leave] /= piv
        for i in range(m):
            if i != leave and T[i, enter] != 0.0:
                T[i] -= T[i, enter] * T[leave]
        basis[leave] = enter
    return "iteration_limit", None


def enumerate_binary_lp(data, solve_lp_fn, options=None):
    """Brute-force MILP oracle: try every binary pattern, LP per pattern."""
    import mtscopf.formulation as F

    bins = np.flatnonzero(data.is_binary)
    best = None
    for bits in itertools.product((0.0, 1.0), repeat=len(bins)):
        lo = data.lo.copy()
        hi = data.hi.copy()
        lo[bins] = bits
        hi[bins] = bits
        patched = F.FrozenModelData(
            n=data.n, lo=lo, hi=hi, is_binary=data.is_binary, names=data.names,
            row_cols=data.row_cols, row_vals=data.row_vals, senses=data.senses,
            rhs=data.rhs, obj=data.obj, obj_constant=data.obj_constant)
        res = solve_lp_fn(patched, options)
        if res.status == "optimal" and (best is None or res.objective > best):
            best = res.objective
    return best


def trajectory_extension_ok(lo, hi, ramp_up, ramp_down, durations, grid=9) -> bool:
    """Every grid point of every final interval must lie on some full
    trajectory respecting the ramps and the intervals (interval DP)."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    T = len(lo)
    if np.any(lo > hi + 1e-12):
        return False

    # forward-reachable interval at each t
    fwd = [(lo[0], hi[0])]
    for t in range(1, T):
        a, b = fwd[-1]
        d = float(durations[t])
        cand = (max(lo[t], a - ramp_down * d), min(hi[t], b + ramp_up * d))
        if cand[0] > cand[1] + 1e-12:
            return False
        fwd.append(cand)
    # backward-reachable
    bwd = [None] * T
    bwd[T - 1] = (lo[T - 1], hi[T - 1])
    for t in range(T - 2, -1, -1):
        a, b = bwd[t + 1]
        d = float(durations[t + 1])
        cand = (max(lo[t], a - ramp_up * d), min(hi[t], b + ramp_down * d))
        if cand[0] > cand[1] + 1e-12:
            return False
        bwd[t] = cand
    for t in range(T):
        for p in np.linspace(lo[t], hi[t], grid):
            if not (fwd[t][0] - 1e-9 <= p <= fwd[t][1] + 1e-9):
                return False
            if not (bwd[t][0] - 1e-9 <= p <= bwd[t][1] + 1e-9):
                return False
    return True


def dc_flow_resolve(n_buses, ref, lines, P):
    """Plain dense DC power flow; lines are (from, to, x).  Returns flows."""
    B = np.zeros((n_buses, n_buses))
    for f, t, x in lines:
        b = 1.0 / x
        B[f, f] += b
        B[t, t] += b
        B[f, t] -= b
        B[t, f] -= b
    keep = [i for i in range(n_buses) if i != ref]
    theta = np.zeros(n_buses)
    theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], np.asarray(P, float)[keep])
    return [(theta[f] - theta[t]) / x for f, t, x in lines]
