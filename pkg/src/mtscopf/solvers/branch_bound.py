"""Best-first branch-and-bound MILP solver over LP relaxations.

Branches on the most-fractional binary; nodes are warm-started from the
parent basis through the dual simplex.  Accepts an optional feasible warm
start so callers with an always-feasible construction get an incumbent
even at a near-zero time limit.  Deterministic for worker_count=1.
"""
from __future__ import annotations

import heapq
import math
import time

import numpy as np

from ..formulation import FrozenModelData, Model
from . import MilpResult, SolveOptions
from .simplex import resolve_with_bounds, solve_lp

_INT_TOL = 1e-6


def _check_feasible(data: FrozenModelData, x: np.ndarray, tol: float) -> bool:
    if x is None or len(x) != data.n:
        return False
    if np.any(x < data.lo - tol) or np.any(x > data.hi + tol):
        return False
    bins = np.flatnonzero(data.is_binary)
    if bins.size and np.any(np.abs(x[bins] - np.round(x[bins])) > _INT_TOL):
        return False
    for cols, vals, sense, rhs in zip(data.row_cols, data.row_vals, data.senses, data.rhs):
        v = float(vals @ x[cols]) if len(cols) else 0.0
        if sense == "<=" and v > rhs + tol:
            return False
        if sense == ">=" and v < rhs - tol:
            return False
        if sense == "=" and abs(v - rhs) > tol:
            return False
    return True


def _objective(data: FrozenModelData, x: np.ndarray) -> float:
    return float(data.obj @ x + data.obj_constant)


def solve_milp(model, options: SolveOptions | None = None,
               warm_start: np.ndarray | None = None) -> MilpResult:
    """Maximize over the mixed-binary model; returns the incumbent at the
    time limit with status ``incumbent_time_limit``."""
    data = model.freeze() if isinstance(model, Model) else model
    options = options or SolveOptions()
    t0 = time.monotonic()
    deadline = t0 + options.time_limit
    log: list[str] = []

    bins = np.flatnonzero(data.is_binary)
    inc_x = None
    inc_obj = -math.inf
    if warm_start is not None and _check_feasible(data, warm_start, 10 * options.feas_tol):
        inc_x = np.asarray(warm_start, dtype=float).copy()
        inc_obj = _objective(data, inc_x)

    def emit(it, bound, nodes):
        gap = _gap(bound)
        obj_s = f"{inc_obj:.8g}" if inc_x is not None else "none"
        log.append(f"iter={it} obj={obj_s} bound={bound:.8g} gap={gap:.3g} "
                   f"nodes={nodes} elapsed_s={time.monotonic() - t0:.2f}")

    def _gap(bound):
        if inc_x is None:
            return math.inf
        return abs(bound - inc_obj) / max(1.0, abs(inc_obj))

    def finish(status, bound):
        emit(it_count, bound, nodes_done)
        return MilpResult(status=status, objective=(inc_obj if inc_x is not None else None),
                          x=inc_x, bound=bound, gap=_gap(bound), nodes=nodes_done, log=log)

    it_count = 0
    nodes_done = 0

    remaining = deadline - time.monotonic()
    if remaining <= 0.01:
        status = "incumbent_time_limit"
        bound = math.inf if inc_x is None else inc_obj
        return MilpResult(status, inc_obj if inc_x is not None else None, inc_x,
                          bound, _gap(bound), 0, log)

    root_opts = SolveOptions(time_limit=max(remaining, 0.011), mip_gap=options.mip_gap,
                             feas_tol=options.feas_tol, opt_tol=options.opt_tol,
                             worker_count=1)
    root = solve_lp(data, root_opts)
    if root.status == "infeasible":
        if inc_x is not None:
            return finish("optimal", inc_obj)
        return finish("infeasible_reported", -math.inf)
    if root.status in ("time_limit", "iteration_limit"):
        return finish("incumbent_time_limit", math.inf)
    if root.status == "unbounded":
        return finish("infeasible_reported", math.inf)

    # node: (-bound, tiebreak, lo, hi, basis)
    counter = 0
    heap = [(-root.objective, counter, data.lo.copy(), data.hi.copy(), root.basis, root.x)]
    global_bound = root.objective

    def maybe_incumbent(x):
        nonlocal inc_x, inc_obj
        obj = _objective(data, x)
        if obj > inc_obj + 1e-12 and _check_feasible(data, x, 10 * options.feas_tol):
            inc_x = x.copy()
            if bins.size:
                inc_x[bins] = np.round(inc_x[bins])
            inc_obj = obj

    def try_rounding(x, lo, hi, basis):
        """Fix binaries at their rounded LP values and re-solve."""
        if not bins.size:
            return
        lo2, hi2 = lo.copy(), hi.copy()
        vals = np.clip(np.round(x[bins]), lo2[bins], hi2[bins])
        lo2[bins] = vals
        hi2[bins] = vals
        opts = SolveOptions(time_limit=max(deadline - time.monotonic(), 0.011),
                            mip_gap=options.mip_gap, feas_tol=options.feas_tol,
                            opt_tol=options.opt_tol, worker_count=1)
        res = resolve_with_bounds(data, opts, basis, lo2, hi2)
        if res.status == "optimal":
            maybe_incumbent(res.x)

    first_node = True
    while heap:
        if time.monotonic() > deadline:
            return finish("incumbent_time_limit", global_bound)
        neg_bound, _, lo, hi, basis, x_lp = heapq.heappop(heap)
        node_bound = -neg_bound
        global_bound = node_bound if not heap else max(node_bound, -heap[0][0])
        if inc_x is not None and node_bound <= inc_obj + 1e-12:
            global_bound = inc_obj
            return finish("optimal", global_bound)
        if inc_x is not None and _gap(node_bound) <= options.mip_gap:
            return finish("optimal", node_bound)
        nodes_done += 1
        it_count += 1

        frac = np.abs(x_lp[bins] - np.round(x_lp[bins])) if bins.size else np.array([])
        if not bins.size or np.all(frac <= _INT_TOL):
            maybe_incumbent(x_lp)
            continue
        if first_node:
            try_rounding(x_lp, lo, hi, basis)
            first_node = False
            if inc_x is not None and _gap(node_bound) <= options.mip_gap:
                return finish("optimal", node_bound)

        j = int(bins[np.argmax(frac)])
        for fix in (0.0, 1.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[j] = hi2[j] = fix
            opts = SolveOptions(time_limit=max(deadline - time.monotonic(), 0.011),
                                mip_gap=options.mip_gap, feas_tol=options.feas_tol,
                                opt_tol=options.opt_tol, worker_count=1)
            res = resolve_with_bounds(data, opts, basis, lo2, hi2)
            if res.status == "infeasible":
                continue
            if res.status != "optimal":
                if time.monotonic() > deadline:
                    return finish("incumbent_time_limit", global_bound)
                continue
            if inc_x is not None and res.objective <= inc_obj + 1e-12:
                continue  # pruned by bound
            counter += 1
            heapq.heappush(heap, (-res.objective, counter, lo2, hi2, res.basis, res.x))
        if nodes_done % 10 == 0:
            emit(it_count, global_bound, nodes_done)

    if inc_x is not None:
        return finish("optimal", inc_obj)
    return finish("infeasible_reported", -math.inf)
