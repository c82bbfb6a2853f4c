"""End-to-end two-stage pipeline: stage planning, receding ramping bounds,
DC MILP commitment, per-timestep AC solves, time budgeting, and reserve
post-processing.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .ac_stage import build_ac_stage
from .dc_stage import (BoundaryError, DcBoundary, DcStageSpec, ScheduleError,
                       build_dc_model, always_feasible_point, extract_commitment,
                       initial_boundary, line_switching_heuristic)
from .instance import CONSUMER, PRODUCER, Instance, TimeGrid
from .solution import Solution
from .solvers import SolveOptions, solve_milp, solve_nlp
from .solvers.mps import export_mps

log = logging.getLogger("mtscopf.pipeline")

DEFAULT_MARGIN = 30.0  # seconds reserved for I/O
MIN_RUN_BUDGET = 5.0  # below this, emit the fallback immediately
SINGLE_SHOT_BUS_LIMIT = 2000
DEFAULT_STAGE_LEN = 4

CATEGORY_LIMITS = {1: 600.0, 2: 7200.0, 3: 10800.0}


@dataclass
class TimeBudget:
    total: float
    dc: float
    ac: float
    reserve_margin: float


@dataclass
class StagePlan:
    windows: list[tuple[int, int]]
    policies: list[str]  # free | two_event


@dataclass
class RampBounds:
    device_ids: list[str]
    lo: dict[str, np.ndarray]
    hi: dict[str, np.ndarray]
    empty: list[tuple[str, int]] = field(default_factory=list)

    def at(self, dev_id: str, t_local: int) -> tuple[float, float]:
        return float(self.lo[dev_id][t_local]), float(self.hi[dev_id][t_local])


def plan_stages(time_grid: TimeGrid, category: int, bus_count: int,
                stage_len: int | None = None) -> StagePlan:
    """Single window at or below the single-shot size, else fixed-length
    stages covering the horizon."""
    if category not in (1, 2, 3):
        raise ValueError(f"unknown category {category}")
    T = time_grid.count
    if stage_len is None:
        if bus_count <= SINGLE_SHOT_BUS_LIMIT:
            return StagePlan([(0, T)], ["free"])
        stage_len = DEFAULT_STAGE_LEN
    if stage_len >= T:
        return StagePlan([(0, T)], ["free"])
    windows = [(s, min(s + stage_len, T)) for s in range(0, T, stage_len)]
    return StagePlan(windows, ["two_event"] * len(windows))


def propagate_bounds_stage1(p_hi: np.ndarray, p_lo: np.ndarray,
                            ramp_up: float, ramp_down: float,
                            durations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward sweep: cap each interval by what its successor can still
    reach (updated values propagate transitively)."""
    hi = np.asarray(p_hi, dtype=float).copy()
    lo = np.asarray(p_lo, dtype=float).copy()
    T = len(hi)
    for t in range(T - 2, -1, -1):
        d_next = float(durations[t + 1])
        hi[t] = min(hi[t], hi[t + 1] + ramp_down * d_next)
        lo[t] = max(lo[t], lo[t + 1] - ramp_up * d_next)
    return hi, lo


def propagate_bounds_stage2(hi_new: np.ndarray, lo_new: np.ndarray,
                            ramp_up: float, ramp_down: float,
                            durations: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Forward sweep over the stage-1 output; the right-hand side uses the
    stage-1 values, not the running finals.  Returns empty-interval spots."""
    hi_new = np.asarray(hi_new, dtype=float)
    lo_new = np.asarray(lo_new, dtype=float)
    hi = hi_new.copy()
    lo = lo_new.copy()
    T = len(hi)
    for t in range(1, T):
        d_t = float(durations[t])
        hi[t] = min(hi_new[t], hi_new[t - 1] + ramp_up * d_t)
        lo[t] = max(lo_new[t], lo_new[t - 1] - ramp_down * d_t)
    empty = [t for t in range(T) if lo[t] > hi[t] + 1e-12]
    return hi, lo, empty


def compute_ramp_bounds(instance: Instance, window: tuple[int, int]) -> RampBounds:
    w0, w1 = window
    durations = instance.time_grid.durations[w0:w1]
    rb = RampBounds(device_ids=[d.id for d in instance.devices], lo={}, hi={})
    for dev in instance.devices:
        hi1, lo1 = propagate_bounds_stage1(dev.p_max[w0:w1], dev.p_min[w0:w1],
                                           dev.ramp_up, dev.ramp_down, durations)
        hi2, lo2, empty = propagate_bounds_stage2(hi1, lo1, dev.ramp_up,
                                                  dev.ramp_down, durations)
        rb.hi[dev.id] = hi2
        rb.lo[dev.id] = lo2
        rb.empty.extend((dev.id, t) for t in empty)
    return rb


def allocate_time_budget(total_seconds: float, margin: float | None = None) -> TimeBudget:
    """One third of the usable budget to the DC stage, the rest to AC."""
    if margin is None:
        margin = min(DEFAULT_MARGIN, 0.1 * total_seconds)
    usable = total_seconds - margin
    if usable <= 0:
        raise ValueError(f"no usable budget: total {total_seconds} <= margin {margin}")
    dc = usable / 3.0
    ac = usable - dc
    return TimeBudget(total=total_seconds, dc=dc, ac=ac, reserve_margin=margin)


# ---------------------------------------------------------------------------
# reserve post-processing

def _marginal_price(device, t: int, p: float) -> float:
    cum = 0.0
    for qty, price in device.cost_blocks[t]:
        cum += qty
        if p <= cum + 1e-12:
            return price
    return device.cost_blocks[t][-1][1]


def postprocess_reserves(solution: Solution, instance: Instance) -> Solution:
    """Greedy headroom allocation in ascending marginal-cost order; dispatch
    values are never touched; shortfall is left for the scorer to price."""
    solution.reserve_up[:] = 0.0
    solution.reserve_down[:] = 0.0
    d = instance.time_grid.durations
    for t in range(instance.T):
        head_up = np.zeros(len(instance.devices))
        head_dn = np.zeros(len(instance.devices))
        for j, dev in enumerate(instance.devices):
            if not solution.on[t, j]:
                continue
            p = float(solution.p[t, j])
            head_up[j] = max(0.0, min(float(dev.p_max[t]) - p, dev.ramp_up * float(d[t])))
            head_dn[j] = max(0.0, min(p - float(dev.p_min[t]), dev.ramp_down * float(d[t])))
        for zone in instance.zones:
            members = [j for j, dev in enumerate(instance.devices)
                       if dev.bus in zone.buses and solution.on[t, j]]
            members.sort(key=lambda j: (_marginal_price(instance.devices[j], t,
                                                        float(solution.p[t, j])),
                                        instance.devices[j].id))
            for req, head, res in ((float(zone.req_up[t]), head_up, solution.reserve_up),
                                   (float(zone.req_down[t]), head_dn, solution.reserve_down)):
                need = req
                for j in members:
                    if need <= 1e-12:
                        break
                    take = min(head[j], need)
                    if take > 0:
                        res[t, j] += take
                        head[j] -= take
                        need -= take
    return solution


# ---------------------------------------------------------------------------
# pipeline accounting (independent of the evaluator module)

def _greedy_split(device, t: int, p: float) -> list[float]:
    out = []
    left = p
    for qty, _ in device.cost_blocks[t]:
        take = min(qty, max(0.0, left))
        out.append(take)
        left -= take
    return out


def ac_residuals(solution: Solution, instance: Instance, t: int,
                 opened: set[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Physical bus balance residuals (real, reactive) of the stored state,
    computed from the branch trigonometric flow equations."""
    B = len(instance.buses)
    real = np.zeros(B)
    reac = np.zeros(B)
    v = solution.v[t]
    th = solution.theta[t]
    for j, dev in enumerate(instance.devices):
        i = instance.bus_index[dev.bus]
        sgn = 1.0 if dev.kind == PRODUCER else -1.0
        real[i] += sgn * solution.p[t, j]
        reac[i] += sgn * solution.q[t, j]
    for sh in instance.shunts:
        i = instance.bus_index[sh.bus]
        real[i] -= float(sh.g_sh[t]) * v[i] ** 2
        reac[i] += float(sh.b_sh[t]) * v[i] ** 2
    for k, br in enumerate(instance.branches):
        if not solution.closed[t, k]:
            continue
        f = instance.bus_index[br.from_bus]
        to = instance.bus_index[br.to_bus]
        g, b, bp = br.g, br.b, br.b + br.b_ch / 2.0
        for own, oth in ((f, to), (to, f)):
            dlt = th[own] - th[oth]
            c, s = math.cos(dlt), math.sin(dlt)
            P = g * v[own] ** 2 - v[own] * v[oth] * (g * c + b * s)
            Q = -bp * v[own] ** 2 - v[own] * v[oth] * (g * s - b * c)
            real[own] -= P
            reac[own] -= Q
    return real, reac


def branch_loadings(solution: Solution, instance: Instance, t: int) -> np.ndarray:
    """Apparent power per branch (max of the two ends); open branches 0."""
    out = np.zeros(len(instance.branches))
    v = solution.v[t]
    th = solution.theta[t]
    for k, br in enumerate(instance.branches):
        if not solution.closed[t, k]:
            continue
        f = instance.bus_index[br.from_bus]
        to = instance.bus_index[br.to_bus]
        g, b, bp = br.g, br.b, br.b + br.b_ch / 2.0
        s_side = []
        for own, oth in ((f, to), (to, f)):
            dlt = th[own] - th[oth]
            c, s = math.cos(dlt), math.sin(dlt)
            P = g * v[own] ** 2 - v[own] * v[oth] * (g * c + b * s)
            Q = -bp * v[own] ** 2 - v[own] * v[oth] * (g * s - b * c)
            s_side.append(math.hypot(P, Q))
        out[k] = max(s_side)
    return out


def compute_breakdown(solution: Solution, instance: Instance) -> dict[str, float]:
    """Objective breakdown recomputed from raw solution values."""
    d = instance.time_grid.durations
    benefit = cost = startup = on_c = shut_c = 0.0
    mism = over = short = 0.0
    for t in range(instance.T):
        dt = float(d[t])
        for j, dev in enumerate(instance.devices):
            split = _greedy_split(dev, t, float(solution.p[t, j]))
            val = sum(q * price for q, (_, price) in zip(split, dev.cost_blocks[t])) * dt
            if dev.kind == CONSUMER:
                benefit += val
            else:
                cost += val
            if solution.on[t, j]:
                on_c += dev.on_cost * dt
            if solution.stop[t, j]:
                shut_c += dev.shutdown_cost
        real, reac = ac_residuals(solution, instance, t)
        mism += instance.penalties.mismatch_penalty * dt * (np.abs(real).sum()
                                                            + np.abs(reac).sum())
        s = branch_loadings(solution, instance, t)
        for k, br in enumerate(instance.branches):
            over += instance.penalties.overload_penalty * dt * max(0.0, s[k] - br.s_max)
        for zone in instance.zones:
            members = [j for j, dev in enumerate(instance.devices) if dev.bus in zone.buses]
            up = sum(float(solution.reserve_up[t, j]) for j in members)
            dn = sum(float(solution.reserve_down[t, j]) for j in members)
            short += zone.shortfall_penalty * dt * (max(0.0, float(zone.req_up[t]) - up)
                                                    + max(0.0, float(zone.req_down[t]) - dn))
    # startup costs from downtime simulation
    for j, dev in enumerate(instance.devices):
        status = dev.initial.status
        held = dev.initial.duration_h
        for t in range(instance.T):
            if solution.start[t, j]:
                startup += dev.startup_cost_for(held)
            if solution.start[t, j] or solution.stop[t, j]:
                status = solution.on[t, j]
                held = float(d[t])
            else:
                held += float(d[t])
        del status
    total = benefit - cost - startup - on_c - shut_c - mism - over - short
    return {
        "consumer_benefit": benefit, "producer_cost": cost, "startup_cost": startup,
        "on_cost": on_c, "shutdown_cost": shut_c, "mismatch_penalty": mism,
        "overload_penalty": over, "reserve_shortfall_penalty": short, "total": total,
    }


# ---------------------------------------------------------------------------
# fallback construction

def fallback_solution(instance: Instance, flag: str = "fallback") -> Solution:
    """Always-feasible minimal-commitment schedule: everything off except
    devices the initial state forces on, which ramp down and stop as soon
    as their minimum uptime and ramp limits allow."""
    sol = Solution.zeros(instance)
    d = instance.time_grid.durations
    for i, bus in enumerate(instance.buses):
        sol.v[:, i] = min(max(1.0, bus.v_min), bus.v_max)
    for j, dev in enumerate(instance.devices):
        on_prev = dev.initial.status
        p_prev = dev.initial.p
        held = dev.initial.duration_h
        for t in range(instance.T):
            dt = float(d[t])
            forced = on_prev == 1 and held < dev.min_uptime - 1e-9
            stop_ok = p_prev <= dev.ramp_down * dt + float(dev.p_min[t]) + 1e-12
            if on_prev and (forced or not stop_ok):
                u = 1
                p = min(max(float(dev.p_min[t]), p_prev - dev.ramp_down * dt),
                        min(float(dev.p_max[t]), p_prev + dev.ramp_up * dt))
            else:
                u, p = 0, 0.0
            sol.on[t, j] = u
            sol.start[t, j] = int(u == 1 and on_prev == 0)
            sol.stop[t, j] = int(u == 0 and on_prev == 1)
            sol.p[t, j] = p
            sol.q[t, j] = min(max(0.0, float(dev.q_min[t])), float(dev.q_max[t])) if u else 0.0
            if u != on_prev:
                held = dt
            else:
                held += dt
            on_prev, p_prev = u, p
    sol.flags.append("fallback")
    if flag != "fallback":
        sol.flags.append(flag)
    sol.objective = compute_breakdown(sol, instance)
    return sol


# ---------------------------------------------------------------------------
# main entry

def run_pipeline(instance: Instance, category: int,
                 options: SolveOptions | None = None,
                 stage_len: int | None = None,
                 switch_threshold: float = 0.5,
                 margin: float | None = None,
                 export_mps_dir: str | None = None,
                 workers: int = 1) -> Solution:
    """Run the full DC-then-AC pipeline under the wall-clock budget."""
    t_begin = time.monotonic()
    if options is None:
        options = SolveOptions(time_limit=CATEGORY_LIMITS[category])
    total = options.time_limit
    progress: list[str] = []

    def emit(stage, phase, obj, flag):
        line = (f"stage={stage} phase={phase} "
                f"elapsed_s={time.monotonic() - t_begin:.2f} obj={obj:.6g} flag={flag}")
        progress.append(line)
        log.info(line)

    if total < MIN_RUN_BUDGET:
        sol = fallback_solution(instance)
        sol.meta.update({"progress": progress, "dc_elapsed": 0.0, "total_elapsed":
                         time.monotonic() - t_begin})
        return sol
    try:
        budget = allocate_time_budget(total, margin)
    except ValueError:
        sol = fallback_solution(instance)
        sol.meta.update({"progress": progress, "dc_elapsed": 0.0, "total_elapsed":
                         time.monotonic() - t_begin})
        return sol

    plan = plan_stages(instance.time_grid, category, len(instance.buses), stage_len)
    opened = line_switching_heuristic(instance, switch_threshold)
    boundary = initial_boundary(instance)
    deadline = t_begin + total - budget.reserve_margin / 2.0

    solution = Solution.zeros(instance)
    for k_br, br in enumerate(instance.branches):
        solution.closed[:, k_br] = int(br.initial_closed and br.id not in opened)

    flags: list[str] = []
    dc_elapsed_total = 0.0
    T = instance.T

    for k, window in enumerate(plan.windows):
        w0, w1 = window
        W = w1 - w0
        frac = W / T
        rb = compute_ramp_bounds(instance, window)
        spec = DcStageSpec(window=window, boundary=boundary,
                           bound_overrides={d: (rb.lo[d], rb.hi[d]) for d in rb.lo})
        try:
            model, vm = build_dc_model(instance, spec, opened,
                                       two_event_policy=plan.policies[k] == "two_event")
            x_warm = always_feasible_point(instance, spec, model, vm)
        except BoundaryError as exc:
            log.warning("stage %d: %s", k, exc)
            sol = fallback_solution(instance, flag=f"boundary_error_stage{k}")
            sol.meta.update({"progress": progress, "dc_elapsed": dc_elapsed_total,
                             "total_elapsed": time.monotonic() - t_begin})
            return sol
        if export_mps_dir:
            path = f"{export_mps_dir.rstrip('/')}/{instance.header.name}_{k}_dc.mps"
            with open(path, "w") as fh:
                fh.write(export_mps(model))

        dc_budget_k = budget.dc * frac
        dc_left = min(dc_budget_k, max(0.011, deadline - time.monotonic()))
        milp_opts = SolveOptions(time_limit=max(dc_left, 0.011),
                                 mip_gap=options.mip_gap, feas_tol=options.feas_tol,
                                 opt_tol=options.opt_tol, worker_count=1)
        t0 = time.monotonic()
        res = solve_milp(model, milp_opts, warm_start=x_warm)
        dc_elapsed = time.monotonic() - t0
        dc_elapsed_total += dc_elapsed
        emit(k, "dc", res.objective if res.objective is not None else math.nan,
             res.status)
        if res.x is None:
            sol = fallback_solution(instance, flag="no_dc_incumbent")
            sol.meta.update({"progress": progress, "dc_elapsed": dc_elapsed_total,
                             "total_elapsed": time.monotonic() - t_begin})
            return sol
        if res.status == "incumbent_time_limit":
            flags.append(f"dc_stage{k}_time_limit")
        try:
            sched = extract_commitment(res, vm, spec, instance)
        except ScheduleError as exc:
            log.warning("stage %d schedule: %s", k, exc)
            sol = fallback_solution(instance, flag=f"schedule_error_stage{k}")
            sol.meta.update({"progress": progress, "dc_elapsed": dc_elapsed_total,
                             "total_elapsed": time.monotonic() - t_begin})
            return sol

        # AC solves, sequential in t: the receding bounds keep each step
        # extendable, the prior-dispatch clip keeps each step ramp-legal
        ac_budget_k = budget.ac * frac
        prior = {d.id: (boundary[d.id].status, boundary[d.id].p)
                 for d in instance.devices}
        prev_x = None
        stage_obj = 0.0
        ac_flag = "ok"
        for t_local in range(W):
            tg = w0 + t_local
            commitment = {dev.id: int(sched.on[t_local, j])
                          for j, dev in enumerate(instance.devices)}
            ramp_at_t = {dev.id: rb.at(dev.id, t_local) for dev in instance.devices}
            stage = build_ac_stage(instance, tg, commitment, ramp_at_t, prior, opened)
            if stage.warnings:
                flags.extend(stage.warnings)
            x0 = stage.x0.copy()
            if prev_x is not None:
                x0[: 2 * stage.B] = np.clip(prev_x[: 2 * stage.B],
                                            stage.x_lo[: 2 * stage.B],
                                            stage.x_hi[: 2 * stage.B])
            t_left = deadline - time.monotonic()
            per_t = min(ac_budget_k / W, max(t_left, 0.0))
            if per_t < 0.02:
                x = x0
                ac_flag = "budget"
                flags.append(f"ac_t{tg}_skipped")
            else:
                nres = solve_nlp(stage, SolveOptions(
                    time_limit=per_t, mip_gap=options.mip_gap,
                    feas_tol=max(options.feas_tol, 1e-8), opt_tol=1e-6), x0=x0)
                x = nres.x
                if nres.status != "converged":
                    ac_flag = nres.status
                    flags.append(f"ac_t{tg}_{nres.status}")
            p_dev = stage.device_power(x)
            solution.p[tg] = p_dev
            solution.q[tg] = x[stage.q_col]
            solution.v[tg] = x[: stage.B]
            solution.theta[tg] = x[stage.B: 2 * stage.B]
            solution.on[tg] = sched.on[t_local]
            solution.start[tg] = sched.start[t_local]
            solution.stop[tg] = sched.stop[t_local]
            stage_obj += stage.objective(x)
            prior = {dev.id: (int(sched.on[t_local, j]), float(p_dev[j]))
                     for j, dev in enumerate(instance.devices)}
            prev_x = x
        emit(k, "ac", stage_obj, ac_flag)

        # carry boundary to the next stage
        new_boundary: dict[str, DcBoundary] = {}
        for j, dev in enumerate(instance.devices):
            status = int(solution.on[w1 - 1, j])
            held = None
            hours = 0.0
            for tt in range(w1 - 1, -1, -1):
                if int(solution.on[tt, j]) != status:
                    held = hours
                    break
                hours += float(instance.time_grid.durations[tt])
            if held is None:
                init_held = (dev.initial.duration_h if dev.initial.status == status
                             else 0.0)
                held = hours + init_held
            starts_used = boundary[dev.id].starts_used + int(sched.start[:, j].sum())
            energy_used = dict(boundary[dev.id].energy_used)
            for w_idx, win in enumerate(dev.energy_windows):
                lo_t = max(win.t_start, w0)
                hi_t = min(win.t_end, w1 - 1)
                if lo_t <= hi_t:
                    add = sum(float(solution.p[tt, j]) * float(instance.time_grid.durations[tt])
                              for tt in range(lo_t, hi_t + 1))
                    energy_used[w_idx] = energy_used.get(w_idx, 0.0) + add
            new_boundary[dev.id] = DcBoundary(
                status=status, duration_h=held, p=float(solution.p[w1 - 1, j]),
                starts_used=starts_used, energy_used=energy_used)
        boundary = new_boundary

    postprocess_reserves(solution, instance)
    emit(len(plan.windows) - 1, "reserve", 0.0, "ok")

    ramp_bad = check_sequential_ramps(solution, instance)
    if ramp_bad:
        flags.append("ramp_violation")
        for msg in ramp_bad[:5]:
            log.warning("ramp violation: %s", msg)

    solution.flags.extend(flags)
    solution.objective = compute_breakdown(solution, instance)
    solution.meta.update({
        "progress": progress,
        "dc_elapsed": dc_elapsed_total,
        "total_elapsed": time.monotonic() - t_begin,
        "opened_branches": sorted(opened),
        "stages": len(plan.windows),
    })
    return solution


def check_sequential_ramps(solution: Solution, instance: Instance) -> list[str]:
    """Ramp legality of the concatenated dispatches, start/stop allowances
    included; the receding bounds exist to make this list empty."""
    bad = []
    d = instance.time_grid.durations
    for j, dev in enumerate(instance.devices):
        p_prev = dev.initial.p if dev.initial.status else 0.0
        for t in range(instance.T):
            dt = float(d[t])
            allow = float(dev.p_min[t])
            up_lim = dev.ramp_up * dt + (allow if solution.start[t, j] else 0.0)
            dn_lim = dev.ramp_down * dt + (allow if solution.stop[t, j] else 0.0)
            delta = float(solution.p[t, j]) - p_prev
            if delta > up_lim + 1e-6 or -delta > dn_lim + 1e-6:
                bad.append(f"{dev.id} t={t}: delta {delta:+.6f} vs +{up_lim}/-{dn_lim}")
            p_prev = float(solution.p[t, j])
    return bad
