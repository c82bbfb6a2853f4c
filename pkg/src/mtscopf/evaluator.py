"""Independent scorer, feasibility checker, and contingency screen.

Deliberately avoids the pipeline's code paths: bus injections come from a
complex admittance matrix, block splits and startup categories are
re-derived from primal values, and every constraint is rechecked from the
instance data alone.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .instance import CONSUMER, PRODUCER, Instance
from .solution import Solution

HARD_TOL = 1e-6  # p.u. slack on hard numeric checks


@dataclass
class ScoreBreakdown:
    consumer_benefit: float = 0.0
    producer_cost: float = 0.0
    startup_cost: float = 0.0
    on_cost: float = 0.0
    shutdown_cost: float = 0.0
    mismatch_penalty: float = 0.0
    overload_penalty: float = 0.0
    reserve_shortfall_penalty: float = 0.0
    total: float = 0.0

    def finalize(self) -> "ScoreBreakdown":
        self.total = (self.consumer_benefit - self.producer_cost - self.startup_cost
                      - self.on_cost - self.shutdown_cost - self.mismatch_penalty
                      - self.overload_penalty - self.reserve_shortfall_penalty)
        return self

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in (
            "consumer_benefit", "producer_cost", "startup_cost", "on_cost",
            "shutdown_cost", "mismatch_penalty", "overload_penalty",
            "reserve_shortfall_penalty", "total")}


@dataclass
class HardViolation:
    entity: str
    t: int
    rule: str
    magnitude: float

    def __str__(self):
        return f"[{self.entity} t={self.t}] {self.rule} (|{self.magnitude:.3e}|)"


@dataclass
class ViolationReport:
    hard: list[HardViolation] = field(default_factory=list)
    mismatch: float = 0.0
    overload: float = 0.0
    shortfall: float = 0.0

    @property
    def valid(self) -> bool:
        return not self.hard


def _ybus(instance: Instance, solution: Solution, t: int) -> np.ndarray:
    B = len(instance.buses)
    Y = np.zeros((B, B), dtype=complex)
    for k, br in enumerate(instance.branches):
        if not solution.closed[t, k]:
            continue
        f = instance.bus_index[br.from_bus]
        to = instance.bus_index[br.to_bus]
        y = 1.0 / complex(br.r, br.x)
        Y[f, f] += y + 1j * br.b_ch / 2.0
        Y[to, to] += y + 1j * br.b_ch / 2.0
        Y[f, to] -= y
        Y[to, f] -= y
    for sh in instance.shunts:
        i = instance.bus_index[sh.bus]
        Y[i, i] += complex(float(sh.g_sh[t]), float(sh.b_sh[t]))
    return Y


def _bus_residuals(instance: Instance, solution: Solution, t: int) -> np.ndarray:
    """Complex power residual per bus: device injections minus network draw."""
    B = len(instance.buses)
    inj = np.zeros(B, dtype=complex)
    for j, dev in enumerate(instance.devices):
        i = instance.bus_index[dev.bus]
        sgn = 1.0 if dev.kind == PRODUCER else -1.0
        inj[i] += sgn * complex(float(solution.p[t, j]), float(solution.q[t, j]))
    V = solution.v[t] * np.exp(1j * solution.theta[t])
    S_net = V * np.conj(_ybus(instance, solution, t) @ V)
    return inj - S_net


def _branch_apparent(instance: Instance, solution: Solution, t: int) -> np.ndarray:
    out = np.zeros(len(instance.branches))
    V = solution.v[t] * np.exp(1j * solution.theta[t])
    for k, br in enumerate(instance.branches):
        if not solution.closed[t, k]:
            continue
        f = instance.bus_index[br.from_bus]
        to = instance.bus_index[br.to_bus]
        y = 1.0 / complex(br.r, br.x)
        i_fr = y * (V[f] - V[to]) + 1j * br.b_ch / 2.0 * V[f]
        i_to = y * (V[to] - V[f]) + 1j * br.b_ch / 2.0 * V[to]
        out[k] = max(abs(V[f] * np.conj(i_fr)), abs(V[to] * np.conj(i_to)))
    return out


def _merit_split(device, t: int, p: float) -> list[float]:
    out, left = [], p
    for qty, _ in device.cost_blocks[t]:
        take = min(qty, max(0.0, left))
        out.append(take)
        left -= take
    return out


def market_surplus(solution: Solution, instance: Instance) -> ScoreBreakdown:
    """Recompute every objective term from raw solution values."""
    solution.check_shapes(instance)
    sb = ScoreBreakdown()
    d = instance.time_grid.durations
    for t in range(instance.T):
        dt = float(d[t])
        for j, dev in enumerate(instance.devices):
            split = _merit_split(dev, t, float(solution.p[t, j]))
            val = sum(q * blk[1] for q, blk in zip(split, dev.cost_blocks[t])) * dt
            if dev.kind == CONSUMER:
                sb.consumer_benefit += val
            else:
                sb.producer_cost += val
            if solution.on[t, j]:
                sb.on_cost += dev.on_cost * dt
            if solution.stop[t, j]:
                sb.shutdown_cost += dev.shutdown_cost
        resid = _bus_residuals(instance, solution, t)
        sb.mismatch_penalty += instance.penalties.mismatch_penalty * dt * (
            np.abs(resid.real).sum() + np.abs(resid.imag).sum())
        s = _branch_apparent(instance, solution, t)
        for k, br in enumerate(instance.branches):
            sb.overload_penalty += (instance.penalties.overload_penalty * dt
                                    * max(0.0, s[k] - br.s_max))
        for zone in instance.zones:
            members = [j for j, dev in enumerate(instance.devices)
                       if dev.bus in zone.buses]
            up = sum(float(solution.reserve_up[t, j]) for j in members)
            dn = sum(float(solution.reserve_down[t, j]) for j in members)
            sb.reserve_shortfall_penalty += zone.shortfall_penalty * dt * (
                max(0.0, float(zone.req_up[t]) - up)
                + max(0.0, float(zone.req_down[t]) - dn))
    for j, dev in enumerate(instance.devices):
        held = dev.initial.duration_h
        status = dev.initial.status
        for t in range(instance.T):
            if solution.start[t, j]:
                sb.startup_cost += dev.startup_cost_for(held)
            if int(solution.on[t, j]) != status:
                status = int(solution.on[t, j])
                held = float(d[t])
            else:
                held += float(d[t])
    return sb.finalize()


def feasibility_report(solution: Solution, instance: Instance,
                       tol: float = HARD_TOL) -> ViolationReport:
    """Hard violations (schema, commitment logic, bounds, ramping, energy,
    reserve headroom) plus the soft penalty magnitudes."""
    rep = ViolationReport()
    try:
        solution.check_shapes(instance)
    except Exception as exc:
        rep.hard.append(HardViolation("solution", -1, f"schema: {exc}", 1.0))
        return rep
    d = instance.time_grid.durations

    for j, dev in enumerate(instance.devices):
        status = dev.initial.status
        held = dev.initial.duration_h
        starts = 0
        for t in range(instance.T):
            on, st, sp = (int(solution.on[t, j]), int(solution.start[t, j]),
                          int(solution.stop[t, j]))
            for name, val in (("on", on), ("start", st), ("stop", sp)):
                if val not in (0, 1):
                    rep.hard.append(HardViolation(dev.id, t, f"{name} not binary", val))
            if on - status != st - sp or st + sp > 1:
                rep.hard.append(HardViolation(dev.id, t, "commitment logic", 1.0))
            if st or sp:
                limit = dev.min_uptime if status else dev.min_downtime
                if held < limit - 1e-9:
                    rule = "minimum uptime" if status else "minimum downtime"
                    rep.hard.append(HardViolation(dev.id, t, rule, limit - held))
                status = on
                held = float(d[t])
            else:
                held += float(d[t])
            starts += st
            p = float(solution.p[t, j])
            q = float(solution.q[t, j])
            if on:
                if p < float(dev.p_min[t]) - tol or p > float(dev.p_max[t]) + tol:
                    rep.hard.append(HardViolation(dev.id, t, "p outside committed bounds",
                                                  p))
                if q < float(dev.q_min[t]) - tol or q > float(dev.q_max[t]) + tol:
                    rep.hard.append(HardViolation(dev.id, t, "q outside committed bounds",
                                                  q))
            else:
                if abs(p) > tol or abs(q) > tol:
                    rep.hard.append(HardViolation(dev.id, t, "power while off",
                                                  max(abs(p), abs(q))))
            ru = float(solution.reserve_up[t, j])
            rd = float(solution.reserve_down[t, j])
            if ru < -tol or rd < -tol:
                rep.hard.append(HardViolation(dev.id, t, "negative reserve", min(ru, rd)))
            if on:
                head_up = max(0.0, min(float(dev.p_max[t]) - p, dev.ramp_up * float(d[t])))
                head_dn = max(0.0, min(p - float(dev.p_min[t]), dev.ramp_down * float(d[t])))
            else:
                head_up = head_dn = 0.0
            if ru > head_up + tol:
                rep.hard.append(HardViolation(dev.id, t, "reserve above headroom",
                                              ru - head_up))
            if rd > head_dn + tol:
                rep.hard.append(HardViolation(dev.id, t, "down reserve above headroom",
                                              rd - head_dn))
        if starts > dev.max_starts:
            rep.hard.append(HardViolation(dev.id, -1, "max starts exceeded",
                                          starts - dev.max_starts))
        # ramping with start/stop allowance
        p_prev = dev.initial.p if dev.initial.status else 0.0
        for t in range(instance.T):
            dt = float(d[t])
            allow = float(dev.p_min[t])
            up_lim = dev.ramp_up * dt + (allow if solution.start[t, j] else 0.0)
            dn_lim = dev.ramp_down * dt + (allow if solution.stop[t, j] else 0.0)
            delta = float(solution.p[t, j]) - p_prev
            if delta > up_lim + tol or -delta > dn_lim + tol:
                rep.hard.append(HardViolation(dev.id, t, "ramp limit",
                                              abs(delta) - min(up_lim, dn_lim)))
            p_prev = float(solution.p[t, j])
        for w in dev.energy_windows:
            e = sum(float(solution.p[t, j]) * float(d[t])
                    for t in range(w.t_start, w.t_end + 1))
            if e < w.e_min - tol or e > w.e_max + tol:
                rep.hard.append(HardViolation(dev.id, w.t_start, "energy window", e))

    for i, bus in enumerate(instance.buses):
        for t in range(instance.T):
            v = float(solution.v[t, i])
            if v < bus.v_min - tol or v > bus.v_max + tol:
                rep.hard.append(HardViolation(bus.id, t, "voltage bounds", v))

    for k, br in enumerate(instance.branches):
        for t in range(instance.T):
            closed = int(solution.closed[t, k])
            if closed not in (0, 1):
                rep.hard.append(HardViolation(br.id, t, "closed flag not binary", closed))
            if not br.switchable and closed != int(br.initial_closed):
                rep.hard.append(HardViolation(br.id, t, "non-switchable branch moved", 1.0))

    for t in range(instance.T):
        dt = float(d[t])
        resid = _bus_residuals(instance, solution, t)
        rep.mismatch += float(np.abs(resid.real).sum() + np.abs(resid.imag).sum()) * dt
        s = _branch_apparent(instance, solution, t)
        for k, br in enumerate(instance.branches):
            rep.overload += max(0.0, s[k] - br.s_max) * dt
        for zone in instance.zones:
            members = [j for j, dev in enumerate(instance.devices)
                       if dev.bus in zone.buses]
            up = sum(float(solution.reserve_up[t, j]) for j in members)
            dn = sum(float(solution.reserve_down[t, j]) for j in members)
            rep.shortfall += (max(0.0, float(zone.req_up[t]) - up)
                              + max(0.0, float(zone.req_down[t]) - dn)) * dt
    return rep


# ---------------------------------------------------------------------------
# contingency screening


@dataclass
class OutageResult:
    branch_id: str
    screenable: bool
    overloads: list[tuple[int, str, float, float]] = field(default_factory=list)
    # (timestep, overloaded branch, post-outage |flow|, limit)


def _dc_base_flows(instance: Instance, solution: Solution, t: int,
                   closed_idx: list[int]):
    """DC flows from the solution's net real injections at timestep t."""
    B = len(instance.buses)
    ref = instance.bus_index[instance.reference_bus]
    P = np.zeros(B)
    for j, dev in enumerate(instance.devices):
        i = instance.bus_index[dev.bus]
        P[i] += (1.0 if dev.kind == PRODUCER else -1.0) * float(solution.p[t, j])
    Bmat = np.zeros((B, B))
    for k in closed_idx:
        br = instance.branches[k]
        f = instance.bus_index[br.from_bus]
        to = instance.bus_index[br.to_bus]
        b = 1.0 / br.x
        Bmat[f, f] += b
        Bmat[to, to] += b
        Bmat[f, to] -= b
        Bmat[to, f] -= b
    keep = [i for i in range(B) if i != ref]
    theta = np.zeros(B)
    theta[keep] = np.linalg.solve(Bmat[np.ix_(keep, keep)], P[keep])
    flows = {}
    for k in closed_idx:
        br = instance.branches[k]
        f = instance.bus_index[br.from_bus]
        to = instance.bus_index[br.to_bus]
        flows[k] = (theta[f] - theta[to]) / br.x
    return flows, Bmat, keep, ref


def contingency_screen(solution: Solution, instance: Instance,
                       outages: list[str] | None = None,
                       workers: int = 1) -> list[OutageResult]:
    """Single-branch-outage DC screen via line-outage distribution factors."""
    closed_idx = [k for k in range(len(instance.branches))
                  if int(solution.closed[0, k])]
    if outages is None:
        outage_idx = list(closed_idx)
    else:
        outage_idx = [instance.branch_index[b] for b in outages]

    per_t = []
    for t in range(instance.T):
        per_t.append(_dc_base_flows(instance, solution, t, closed_idx))

    B = len(instance.buses)

    def screen_one(k_out: int) -> OutageResult:
        br_out = instance.branches[k_out]
        res = OutageResult(branch_id=br_out.id, screenable=True)
        f_o = instance.bus_index[br_out.from_bus]
        t_o = instance.bus_index[br_out.to_bus]
        b_out = 1.0 / br_out.x
        for t in range(instance.T):
            flows, Bmat, keep, ref = per_t[t]
            if k_out not in flows:
                continue
            rhs = np.zeros(B)
            rhs[f_o] += 1.0
            rhs[t_o] -= 1.0
            phi = np.zeros(B)
            phi[keep] = np.linalg.solve(Bmat[np.ix_(keep, keep)], rhs[keep])
            denom = 1.0 - b_out * (phi[f_o] - phi[t_o])
            if abs(denom) < 1e-8:
                res.screenable = False
                res.overloads.clear()
                return res
            f_k = flows[k_out]
            for l in flows:
                if l == k_out:
                    continue
                br_l = instance.branches[l]
                f_l = instance.bus_index[br_l.from_bus]
                t_l = instance.bus_index[br_l.to_bus]
                lodf = (1.0 / br_l.x) * (phi[f_l] - phi[t_l]) / denom
                post = flows[l] + lodf * f_k
                if abs(post) > br_l.s_max + 1e-9:
                    res.overloads.append((t, br_l.id, abs(post), br_l.s_max))
        return res

    if workers > 1 and len(outage_idx) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(screen_one, outage_idx))
    return [screen_one(k) for k in outage_idx]


def scaled_score(score: float, best_score: float) -> float:
    """Achieved score divided by the best recorded score."""
    if best_score <= 0:
        raise ValueError(f"best_score must be positive, got {best_score}")
    return score / best_score
