"""DC stage: linearized MILP with commitment logic, relaxed shunt and
branch-flow constraints, downtime-dependent startup costs, and the
line-switching heuristic.  Extracts the commitment schedule afterwards;
continuous values are discarded by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .formulation import (BINARY, EQ, GE, LE, Bounds2D, LinExpr, Model,
                          add_penalized_slack, clique_startup, envelope_square,
                          onoff_to_bounds, relax_quadratic_row, soc_to_quadratic,
                          split_long_expression)
from .instance import CONSUMER, PRODUCER, Device, Instance

FLOW_CAP_FACTOR = 3.0  # flow variable box, multiples of s_max
OVERLOAD_CAP_FACTOR = 2.0  # overload slack box, multiples of s_max
SPLIT_THRESHOLD = 100  # bus-balance rows longer than this get split
SPLIT_CHUNK = 50


class BoundaryError(Exception):
    """Stage entry state cannot be ramped into any feasible commitment."""


class ScheduleError(Exception):
    """MILP result breaks the commitment contract."""


@dataclass
class DcBoundary:
    status: int  # on/off at window entry
    duration_h: float  # how long that status has held
    p: float  # power at window entry
    starts_used: int = 0
    energy_used: dict[int, float] = field(default_factory=dict)  # per energy-window index


@dataclass
class DcStageSpec:
    window: tuple[int, int]  # [start, stop) global interval indices
    boundary: dict[str, DcBoundary]
    bound_overrides: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def width(self) -> int:
        return self.window[1] - self.window[0]


@dataclass
class DcVarMap:
    p: dict = field(default_factory=dict)  # (dev, t_local) -> VarRef
    blocks: dict = field(default_factory=dict)  # (dev, t_local) -> [VarRef]
    u: dict = field(default_factory=dict)
    start: dict = field(default_factory=dict)
    stop: dict = field(default_factory=dict)
    theta: dict = field(default_factory=dict)  # (bus, t_local)
    v: dict = field(default_factory=dict)
    vsq: dict = field(default_factory=dict)
    mis_pos: dict = field(default_factory=dict)
    mis_neg: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)  # (branch, t_local)
    overload: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)  # (dev, k, t_local)
    defined_aux: list = field(default_factory=list)  # (VarRef, LinExpr) equalities, build order

    def all_handles(self):
        for d in (self.p, self.u, self.start, self.stop, self.theta, self.v,
                  self.vsq, self.mis_pos, self.mis_neg, self.flow, self.overload,
                  self.delta):
            yield from d.values()
        for refs in self.blocks.values():
            yield from refs


@dataclass
class CommitmentSchedule:
    window: tuple[int, int]
    device_ids: list[str]
    on: np.ndarray  # (W, D) ints
    start: np.ndarray
    stop: np.ndarray
    category: dict = field(default_factory=dict)  # (dev_id, t_local) -> category index

    def device_column(self, dev_id: str) -> int:
        return self.device_ids.index(dev_id)


def initial_boundary(instance: Instance) -> dict[str, DcBoundary]:
    return {
        d.id: DcBoundary(status=d.initial.status, duration_h=d.initial.duration_h,
                         p=d.initial.p)
        for d in instance.devices
    }


# ---------------------------------------------------------------------------
# line switching

def line_switching_heuristic(instance: Instance, rho: float = 0.5) -> set[str]:
    """Open branches whose reactance deviates from their parallel group's
    median by more than rho (relative); keeps at least one branch per group
    and never disconnects the network."""
    closed = [b for b in instance.branches if b.initial_closed]
    groups: dict[frozenset, list] = {}
    for b in closed:
        groups.setdefault(frozenset((b.from_bus, b.to_bus)), []).append(b)

    opened: set[str] = set()
    bus_ids = {b.id for b in instance.buses}

    def still_connected(extra_open: str) -> bool:
        trial = opened | {extra_open}
        edges = [(b.from_bus, b.to_bus) for b in closed if b.id not in trial]
        adj = {bid: set() for bid in bus_ids}
        for f, t in edges:
            adj[f].add(t)
            adj[t].add(f)
        seen = set()
        stack = [next(iter(bus_ids))]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(adj[n] - seen)
        return len(seen) == len(bus_ids)

    for key in sorted(groups, key=lambda k: sorted(k)):
        members = groups[key]
        if len(members) < 2:
            continue
        med = float(np.median([abs(b.x) for b in members]))
        candidates = [b for b in members
                      if b.switchable and med > 0 and abs(abs(b.x) - med) / med > rho]
        keep = [b for b in members if b not in candidates]
        if not keep:
            candidates.sort(key=lambda b: (abs(abs(b.x) - med), b.id))
            candidates = candidates[1:]  # at least one member stays closed
        for b in sorted(candidates, key=lambda b: b.id):
            if still_connected(b.id):
                opened.add(b.id)
    return opened


# ---------------------------------------------------------------------------
# model construction helpers

def _effective_bounds(dev: Device, spec: DcStageSpec, t_local: int, t_global: int):
    lo = float(dev.p_min[t_global])
    hi = float(dev.p_max[t_global])
    if spec.bound_overrides and dev.id in spec.bound_overrides:
        olo, ohi = spec.bound_overrides[dev.id]
        lo = max(lo, float(olo[t_local]))
        hi = min(hi, float(ohi[t_local]))
    return lo, hi


def _forced_status(dev: Device, bnd: DcBoundary, durations: np.ndarray) -> np.ndarray:
    """+1 forced on, -1 forced off, 0 free, from the boundary min up/down."""
    W = len(durations)
    forced = np.zeros(W, dtype=int)
    held = bnd.duration_h
    limit = dev.min_uptime if bnd.status else dev.min_downtime
    for t in range(W):
        elapsed = held + float(np.sum(durations[:t]))
        if elapsed < limit - 1e-9:
            forced[t] = 1 if bnd.status else -1
        else:
            break
    return forced


def check_boundary_feasible(dev: Device, bnd: DcBoundary, spec: DcStageSpec,
                            durations: np.ndarray, forced: np.ndarray):
    """The entry power must admit at least one legal move at t=0."""
    if bnd.status != 1:
        return
    t_global = spec.window[0]
    lo, hi = _effective_bounds(dev, spec, 0, t_global)
    d0 = float(durations[0])
    stay_lo = max(lo, bnd.p - dev.ramp_down * d0)
    stay_hi = min(hi, bnd.p + dev.ramp_up * d0)
    can_stay = stay_lo <= stay_hi + 1e-9
    can_stop = (forced[0] != 1) and bnd.p <= dev.ramp_down * d0 + float(dev.p_min[t_global]) + 1e-9
    if not (can_stay or can_stop):
        raise BoundaryError(
            f"device {dev.id}: entry power {bnd.p} cannot ramp into interval 0 "
            f"(stay range [{stay_lo}, {stay_hi}], stop needs p <= "
            f"{dev.ramp_down * d0 + float(dev.p_min[t_global])})")


def build_dc_model(instance: Instance, spec: DcStageSpec,
                   opened: set[str] | None = None,
                   two_event_policy: bool = False) -> tuple[Model, DcVarMap]:
    """Assemble the stage MILP over spec.window."""
    opened = opened or set()
    w0, w1 = spec.window
    if not (0 <= w0 < w1 <= instance.T):
        raise ValueError(f"window {spec.window} outside time grid of {instance.T}")
    W = w1 - w0
    durations = instance.time_grid.durations[w0:w1]
    c_p = instance.penalties.mismatch_penalty
    c_ov = instance.penalties.overload_penalty

    model = Model(name=f"dc_{instance.header.name}_{w0}_{w1}")
    vm = DcVarMap()

    # -- device variables, commitment logic, ramping, energy, startup costs
    for dev in instance.devices:
        bnd = spec.boundary[dev.id]
        forced = _forced_status(dev, bnd, durations)
        check_boundary_feasible(dev, bnd, spec, durations, forced)
        u_vars, start_vars, stop_vars = [], [], []
        for t in range(W):
            tg = w0 + t
            u = model.add_variable(f"u_{dev.id}_{tg}", 0, 1, BINARY)
            st = model.add_variable(f"start_{dev.id}_{tg}", 0, 1, BINARY)
            sp = model.add_variable(f"stop_{dev.id}_{tg}", 0, 1, BINARY)
            if forced[t] == 1:
                model.fix_var(u, 1)
            elif forced[t] == -1:
                model.fix_var(u, 0)
            vm.u[(dev.id, t)] = u
            vm.start[(dev.id, t)] = st
            vm.stop[(dev.id, t)] = sp
            u_vars.append(u)
            start_vars.append(st)
            stop_vars.append(sp)
            model.add_objective_term(u, -dev.on_cost * float(durations[t]))
            model.add_objective_term(sp, -dev.shutdown_cost)

        # switching logic u_t - u_{t-1} = start_t - stop_t
        for t in range(W):
            expr = LinExpr.from_terms([(u_vars[t], 1.0), (start_vars[t], -1.0),
                                       (stop_vars[t], 1.0)])
            if t == 0:
                model.add_constraint(expr, EQ, float(bnd.status))
            else:
                expr.add(u_vars[t - 1], -1.0)
                model.add_constraint(expr, EQ, 0.0)
            model.add_constraint(
                LinExpr.from_terms([(start_vars[t], 1.0), (stop_vars[t], 1.0)]), LE, 1.0)

        # minimum up/down windows in elapsed hours
        for t in range(W):
            up_feed = [s for s in range(t + 1)
                       if float(np.sum(durations[s:t])) < dev.min_uptime - 1e-9]
            if up_feed:
                expr = LinExpr.from_terms([(start_vars[s], 1.0) for s in up_feed])
                expr.add(u_vars[t], -1.0)
                model.add_constraint(expr, LE, 0.0)
            dn_feed = [s for s in range(t + 1)
                       if float(np.sum(durations[s:t])) < dev.min_downtime - 1e-9]
            if dn_feed:
                expr = LinExpr.from_terms([(stop_vars[s], 1.0) for s in dn_feed])
                expr.add(u_vars[t], 1.0)
                model.add_constraint(expr, LE, 1.0)

        budget = max(0, dev.max_starts - bnd.starts_used)
        model.add_constraint(
            LinExpr.from_terms([(s, 1.0) for s in start_vars]), LE, float(budget))

        if two_event_policy:
            restrict_commitment_pattern(model, dev, durations, start_vars, stop_vars)

        # power, blocks, on/off bounds; producers cost, consumers benefit
        for t in range(W):
            tg = w0 + t
            lo, hi = _effective_bounds(dev, spec, t, tg)
            p = model.add_variable(f"p_{dev.id}_{tg}", 0.0, max(hi, 0.0))
            vm.p[(dev.id, t)] = p
            blocks = []
            pdef = LinExpr.from_terms([(p, 1.0)])
            for mth, (qty, price) in enumerate(dev.cost_blocks[tg]):
                blk = model.add_variable(f"blk_{dev.id}_{tg}_{mth}", 0.0, qty)
                blocks.append(blk)
                pdef.add(blk, -1.0)
                coef = (-price if dev.kind == PRODUCER else price) * float(durations[t])
                model.add_objective_term(blk, coef)
            vm.blocks[(dev.id, t)] = blocks
            model.add_constraint(pdef, EQ, 0.0)
            onoff_to_bounds(model, p, u_vars[t], lo, hi)

        # ramping with start/stop allowances of p_min at the switching interval
        for t in range(W):
            tg = w0 + t
            d_t = float(durations[t])
            allowance = float(dev.p_min[tg])
            up = LinExpr.from_terms([(vm.p[(dev.id, t)], 1.0),
                                     (start_vars[t], -allowance)])
            dn = LinExpr.from_terms([(vm.p[(dev.id, t)], -1.0),
                                     (stop_vars[t], -allowance)])
            if t == 0:
                model.add_constraint(up, LE, dev.ramp_up * d_t + bnd.p)
                model.add_constraint(dn, LE, dev.ramp_down * d_t - bnd.p)
            else:
                up.add(vm.p[(dev.id, t - 1)], -1.0)
                dn.add(vm.p[(dev.id, t - 1)], 1.0)
                model.add_constraint(up, LE, dev.ramp_up * d_t)
                model.add_constraint(dn, LE, dev.ramp_down * d_t)

        # energy windows intersecting this stage
        for w_idx, win in enumerate(dev.energy_windows):
            lo_t = max(win.t_start, w0)
            hi_t = min(win.t_end, w1 - 1)
            if lo_t > hi_t:
                continue
            used = bnd.energy_used.get(w_idx, 0.0)
            expr = LinExpr()
            for tg in range(lo_t, hi_t + 1):
                expr.add(vm.p[(dev.id, tg - w0)], float(instance.time_grid.durations[tg]))
            model.add_constraint(expr, LE, win.e_max - used)
            if win.t_end <= w1 - 1:
                expr2 = LinExpr()
                for tg in range(lo_t, hi_t + 1):
                    expr2.add(vm.p[(dev.id, tg - w0)], float(instance.time_grid.durations[tg]))
                model.add_constraint(expr2, GE, win.e_min - used)

        cats = [(c.downtime_lo, c.downtime_hi, c.cost) for c in dev.startup_categories]
        initial_off = bnd.duration_h if bnd.status == 0 else None
        _, deltas = clique_startup(model, cats, durations, initial_off,
                                   stop_vars, start_vars, dev.min_downtime,
                                   name=dev.id)
        for (k, t), var in deltas.items():
            vm.delta[(dev.id, k, t)] = var

    # -- bus variables
    for bus in instance.buses:
        for t in range(W):
            tg = w0 + t
            theta = model.add_variable(f"th_{bus.id}_{tg}", -math.inf, math.inf)
            if bus.is_reference:
                model.fix_var(theta, 0.0)
            v = model.add_variable(f"v_{bus.id}_{tg}", bus.v_min, bus.v_max)
            vsq = model.add_variable(f"vsq_{bus.id}_{tg}",
                                     bus.v_min ** 2, bus.v_max ** 2)
            envelope_square(model, vsq, v, bus.v_min, bus.v_max)
            vm.theta[(bus.id, t)] = theta
            vm.v[(bus.id, t)] = v
            vm.vsq[(bus.id, t)] = vsq

    # -- branch flows, limits
    for br in instance.branches:
        closed = br.initial_closed and br.id not in opened
        cap = FLOW_CAP_FACTOR * br.s_max
        for t in range(W):
            tg = w0 + t
            f = model.add_variable(f"f_{br.id}_{tg}", -cap, cap)
            vm.flow[(br.id, t)] = f
            if not closed:
                model.fix_var(f, 0.0)
                continue
            expr = LinExpr.from_terms([
                (f, 1.0),
                (vm.theta[(br.from_bus, t)], -1.0 / br.x),
                (vm.theta[(br.to_bus, t)], 1.0 / br.x),
            ])
            model.add_constraint(expr, EQ, 0.0)
            s_ov = model.add_variable(f"ov_{br.id}_{tg}", 0.0,
                                      OVERLOAD_CAP_FACTOR * br.s_max)
            vm.overload[(br.id, t)] = s_ov
            row = soc_to_quadratic(1.0, 0.0, 1.0, br.s_max, f, f, s_ov)
            relax_quadratic_row(model, row, prefix=f"fl_{br.id}_{tg}")
            model.add_objective_term(s_ov, -c_ov * float(durations[t]))

    # -- bus balance with shunt substitution, split if long, then slacked
    for bus in instance.buses:
        for t in range(W):
            tg = w0 + t
            expr = LinExpr()
            for dev in instance.devices:
                if dev.bus != bus.id:
                    continue
                expr.add(vm.p[(dev.id, t)], 1.0 if dev.kind == PRODUCER else -1.0)
            for sh in instance.shunts:
                if sh.bus == bus.id:
                    expr.add(vm.vsq[(bus.id, t)], -float(sh.g_sh[tg]))
            for br in instance.branches:
                if br.from_bus == bus.id:
                    expr.add(vm.flow[(br.id, t)], -1.0)
                elif br.to_bus == bus.id:
                    expr.add(vm.flow[(br.id, t)], 1.0)
            if len(expr) > SPLIT_THRESHOLD:
                total, _ = split_long_expression(model, expr, SPLIT_CHUNK,
                                                 name=f"bal_{bus.id}_{tg}")
                expr = LinExpr.from_terms([(total, 1.0)])
            row_id = model.add_constraint(expr, EQ, 0.0)
            slacks = add_penalized_slack(model, row_id, c_p * float(durations[t]),
                                         name=f"mis_{bus.id}_{tg}")
            vm.mis_pos[(bus.id, t)] = slacks[0]
            vm.mis_neg[(bus.id, t)] = slacks[1]

    return model, vm


def restrict_commitment_pattern(model: Model, dev: Device, durations: np.ndarray,
                                start_vars, stop_vars) -> list[int]:
    """Two-switching-event policy for sequential stages: one change allowed
    at the window's first interval, at most one later change once the
    minimum up/down time since the window start has elapsed."""
    W = len(durations)
    ids = []
    later = LinExpr()
    any_later = False
    for t in range(1, W):
        elapsed = float(np.sum(durations[:t]))
        if elapsed < dev.min_uptime - 1e-9:
            model.fix_var(stop_vars[t], 0)
        else:
            later.add(stop_vars[t], 1.0)
            any_later = True
        if elapsed < dev.min_downtime - 1e-9:
            model.fix_var(start_vars[t], 0)
        else:
            later.add(start_vars[t], 1.0)
            any_later = True
    if any_later:
        ids.append(model.add_constraint(later, LE, 1.0))
    return ids


# ---------------------------------------------------------------------------
# always-feasible point

def always_feasible_point(instance: Instance, spec: DcStageSpec, model: Model,
                          vm: DcVarMap, opened: set[str] | None = None) -> np.ndarray:
    """Construct the minimal-commitment feasible point: devices off unless
    the boundary forces them on, forced devices ramp down and stop as soon
    as legal, all mismatch absorbed by the balance slacks."""
    opened = opened or set()
    w0, w1 = spec.window
    W = w1 - w0
    durations = instance.time_grid.durations[w0:w1]
    x = np.zeros(model.num_vars)
    for var in model.variables:
        if var.lo > 0 or var.hi < 0:
            x[var.index] = var.lo if var.lo > 0 else var.hi

    for dev in instance.devices:
        bnd = spec.boundary[dev.id]
        forced = _forced_status(dev, bnd, durations)
        on_prev = bnd.status
        p_prev = bnd.p
        for t in range(W):
            tg = w0 + t
            lo, hi = _effective_bounds(dev, spec, t, tg)
            d_t = float(durations[t])
            stop_var = vm.stop[(dev.id, t)]
            stop_allowed = stop_var.hi > 0.5  # policy may have pinned it
            stop_ok = (stop_allowed and
                       p_prev <= dev.ramp_down * d_t + float(dev.p_min[tg]) + 1e-12)
            if on_prev and (forced[t] == 1 or not stop_ok):
                u_t = 1
            else:
                u_t = 0
            u_var = vm.u[(dev.id, t)]
            if u_t < u_var.lo or u_t > u_var.hi:
                u_t = int(round(u_var.lo))
            x[vm.u[(dev.id, t)].index] = u_t
            x[vm.start[(dev.id, t)].index] = 1 if (u_t and not on_prev) else 0
            x[vm.stop[(dev.id, t)].index] = 1 if (on_prev and not u_t) else 0
            if u_t:
                p_t = min(max(lo, p_prev - dev.ramp_down * d_t), hi)
                p_t = min(p_t, p_prev + dev.ramp_up * d_t) if on_prev else min(p_t, hi)
            else:
                p_t = 0.0
            x[vm.p[(dev.id, t)].index] = p_t
            remaining = p_t
            for blk in vm.blocks[(dev.id, t)]:
                val = min(blk.hi, remaining)
                x[blk.index] = val
                remaining -= val
            on_prev, p_prev = u_t, p_t

    for bus in instance.buses:
        v0 = min(max(1.0, bus.v_min), bus.v_max)
        for t in range(W):
            x[vm.theta[(bus.id, t)].index] = 0.0
            x[vm.v[(bus.id, t)].index] = v0
            x[vm.vsq[(bus.id, t)].index] = v0 * v0

    # flows are zero with flat angles; envelope auxiliaries for f^2 sit at 0
    # (feasible: tangents at f=0 are nonpositive, secant nonnegative)

    for aux, expr in model.aux_definitions:
        x[aux.index] = expr.value(x)

    # balance slacks absorb the residual of each balance row
    for bus in instance.buses:
        for t in range(W):
            pos = vm.mis_pos[(bus.id, t)]
            neg = vm.mis_neg[(bus.id, t)]
            row = None
            for r in model.rows:
                if pos.index in r.expr.coefs:
                    row = r
                    break
            resid = sum(c * x[i] for i, c in row.expr.coefs.items()
                        if i not in (pos.index, neg.index)) + row.expr.constant
            if resid > 0:
                x[pos.index] = resid
                x[neg.index] = 0.0
            else:
                x[pos.index] = 0.0
                x[neg.index] = -resid
    return x


# ---------------------------------------------------------------------------
# commitment extraction

def extract_commitment(result, vm: DcVarMap, spec: DcStageSpec,
                       instance: Instance) -> CommitmentSchedule:
    """Round binaries (tolerance 1e-6), verify the schedule invariants, and
    derive the startup category of every start from its downtime."""
    if result.x is None:
        raise ScheduleError("MILP result carries no incumbent")
    W = spec.width
    w0 = spec.window[0]
    durations = instance.time_grid.durations[w0: w0 + W]
    dev_ids = [d.id for d in instance.devices]
    on = np.zeros((W, len(dev_ids)), dtype=int)
    start = np.zeros_like(on)
    stop = np.zeros_like(on)
    category: dict = {}

    def as_binary(var):
        val = float(result.x[var.index])
        if abs(val - round(val)) > 1e-6:
            raise ScheduleError(f"fractional binary {var.name} = {val}")
        return int(round(val))

    for j, dev in enumerate(instance.devices):
        bnd = spec.boundary[dev.id]
        for t in range(W):
            on[t, j] = as_binary(vm.u[(dev.id, t)])
            start[t, j] = as_binary(vm.start[(dev.id, t)])
            stop[t, j] = as_binary(vm.stop[(dev.id, t)])
        # switching-logic consistency
        prev = bnd.status
        for t in range(W):
            if on[t, j] - prev != start[t, j] - stop[t, j]:
                raise ScheduleError(f"{dev.id}: logic breach at t={t}")
            if start[t, j] + stop[t, j] > 1:
                raise ScheduleError(f"{dev.id}: simultaneous start/stop at t={t}")
            prev = on[t, j]
        if int(start[:, j].sum()) > dev.max_starts - bnd.starts_used:
            raise ScheduleError(f"{dev.id}: start budget exceeded")
        # minimum up/down via elapsed-hours simulation
        status = bnd.status
        held = bnd.duration_h
        for t in range(W):
            if start[t, j] or stop[t, j]:
                limit = dev.min_uptime if status else dev.min_downtime
                if held < limit - 1e-9:
                    raise ScheduleError(
                        f"{dev.id}: switch at t={t} after only {held}h (needs {limit}h)")
                if start[t, j]:
                    category[(dev.id, t)] = dev.startup_category_for(held)
                status = on[t, j]
                held = float(durations[t])
            else:
                held += float(durations[t])
        del status
    return CommitmentSchedule(window=spec.window, device_ids=dev_ids,
                              on=on, start=start, stop=stop, category=category)
