"""Per-timestep full-AC NLP with commitment fixed.

Polar power-flow equalities (2 per bus), block-decomposed device powers
with uncontrollable blocks folded into constants, signed mismatch pair on
the real balance, and a smooth one-sided overload penalty per closed
branch side.  Objective, gradient, constraints, Jacobian and Lagrangian
Hessian are analytic; sparse structures are in coordinate format and fixed
across evaluation points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .instance import CONSUMER, PRODUCER, Device, Instance

FIXED_AT_MAX = "fixed_at_max"
FIXED_AT_ZERO = "fixed_at_zero"
FREE = "free"


@dataclass
class BlockState:
    m: int
    status: str
    lo: float
    hi: float


def classify_blocks(device: Device, t: int, on: int,
                    bound_override: tuple[float, float] | None = None) -> list[BlockState]:
    """Greedy merit-order fill: blocks wholly below the committed floor are
    pinned at their maximum, blocks beyond the ceiling at zero, the
    straddling block keeps the remainder as its floor."""
    blocks = device.cost_blocks[t]
    if not on:
        return [BlockState(m, FIXED_AT_ZERO, 0.0, 0.0) for m in range(len(blocks))]
    p_lo = float(device.p_min[t])
    p_hi = float(device.p_max[t])
    if bound_override is not None:
        p_lo = max(p_lo, bound_override[0])
        p_hi = min(p_hi, bound_override[1])
    total = sum(q for q, _ in blocks)
    if total < p_hi - 1e-9:
        raise ValueError(f"{device.id}: block capacity {total} below ceiling {p_hi}")
    out = []
    cum = 0.0
    for m, (qty, _) in enumerate(blocks):
        lo = min(max(p_lo - cum, 0.0), qty)
        hi = min(max(p_hi - cum, 0.0), qty)
        if hi <= 1e-12:
            out.append(BlockState(m, FIXED_AT_ZERO, 0.0, 0.0))
        elif lo >= qty - 1e-12:
            out.append(BlockState(m, FIXED_AT_MAX, qty, qty))
        else:
            out.append(BlockState(m, FREE, lo, hi))
        cum += qty
    return out


@dataclass
class AcStage:
    """NLP problem for one interval; implements the solver callback contract."""
    n: int
    m: int
    sense: str
    x_lo: np.ndarray
    x_hi: np.ndarray
    x0: np.ndarray
    # layout
    B: int
    D: int
    F: int
    bus_ids: list[str]
    device_ids: list[str]
    free_block_of_device: list[list[int]]  # device -> free-block column indices
    q_col: np.ndarray  # device -> q column
    p_fixed: np.ndarray  # device -> constant part of p
    dev_on: np.ndarray
    # objective pieces
    obj_lin: np.ndarray
    obj_const: float
    # branch data (closed branches only)
    br_from: np.ndarray
    br_to: np.ndarray
    br_g: np.ndarray
    br_b: np.ndarray
    br_bp: np.ndarray  # b + b_ch/2
    br_smax2: np.ndarray
    br_pen: np.ndarray  # penalty weight per branch (already includes d_t)
    br_beta: np.ndarray  # smoothing width per branch
    # constraint constants
    c_real: np.ndarray
    c_reac: np.ndarray
    # shunt data
    sh_bus: np.ndarray
    sh_g: np.ndarray
    sh_b: np.ndarray
    # jacobian machinery
    _jac_rows: np.ndarray = field(default=None, repr=False)
    _jac_cols: np.ndarray = field(default=None, repr=False)
    _jac_inverse: np.ndarray = field(default=None, repr=False)
    _jac_const: np.ndarray = field(default=None, repr=False)
    _jac_nraw_branch: int = 0
    # hessian machinery
    _hess_rows: np.ndarray = field(default=None, repr=False)
    _hess_cols: np.ndarray = field(default=None, repr=False)
    _hess_slot: dict = field(default=None, repr=False)
    _branch_gv: np.ndarray = field(default=None, repr=False)
    warnings: list[str] = field(default_factory=list)

    # ---- layout helpers
    def col_v(self, i):
        return i

    def col_theta(self, i):
        return self.B + i

    def col_mis_pos(self, i):
        return 2 * self.B + self.F + self.D + i

    def col_mis_neg(self, i):
        return 3 * self.B + self.F + self.D + i

    # ---- flow primitives (local frame: v1 own side, v2 other, d = th1 - th2)
    def _sides(self, x):
        v = x[: self.B]
        th = x[self.B: 2 * self.B]
        vf = v[self.br_from]
        vt = v[self.br_to]
        dlt = th[self.br_from] - th[self.br_to]
        return vf, vt, dlt

    @staticmethod
    def _flow(g, b, bp, v1, v2, d):
        c, s = np.cos(d), np.sin(d)
        k1 = g * c + b * s
        k2 = g * s - b * c
        P = g * v1 * v1 - v1 * v2 * k1
        Q = -bp * v1 * v1 - v1 * v2 * k2
        return P, Q, k1, k2

    @staticmethod
    def _flow_grad(g, b, bp, v1, v2, k1, k2):
        # rows: dP/(v1, v2, d), dQ/(v1, v2, d)
        dP = (2 * g * v1 - v2 * k1, -v1 * k1, v1 * v2 * k2)
        dQ = (-2 * bp * v1 - v2 * k2, -v1 * k2, -v1 * v2 * k1)
        return dP, dQ

    def device_power(self, x) -> np.ndarray:
        p = self.p_fixed.copy()
        for j, cols in enumerate(self.free_block_of_device):
            for c in cols:
                p[j] += x[c]
        return p

    def mismatch(self, x) -> np.ndarray:
        return (x[self.col_mis_pos(0): self.col_mis_pos(0) + self.B]
                - x[self.col_mis_neg(0): self.col_mis_neg(0) + self.B])

    # ---- penalty smoothing
    @staticmethod
    def _phi(e, beta):
        r = np.sqrt(e * e + beta * beta)
        return 0.5 * (e + r), 0.5 * (1.0 + e / r), 0.5 * beta * beta / (r * r * r)

    # ---- callbacks
    def objective(self, x) -> float:
        val = float(self.obj_lin @ x) + self.obj_const
        if len(self.br_from):
            vf, vt, dlt = self._sides(x)
            for v1, v2, d in ((vf, vt, dlt), (vt, vf, -dlt)):
                P, Q, _, _ = self._flow(self.br_g, self.br_b, self.br_bp, v1, v2, d)
                e = P * P + Q * Q - self.br_smax2
                phi, _, _ = self._phi(e, self.br_beta)
                val -= float(self.br_pen @ phi)
        return val

    def gradient(self, x) -> np.ndarray:
        g_out = self.obj_lin.copy()
        if len(self.br_from):
            vf, vt, dlt = self._sides(x)
            for own, oth, v1, v2, d in ((self.br_from, self.br_to, vf, vt, dlt),
                                        (self.br_to, self.br_from, vt, vf, -dlt)):
                P, Q, k1, k2 = self._flow(self.br_g, self.br_b, self.br_bp, v1, v2, d)
                dP, dQ = self._flow_grad(self.br_g, self.br_b, self.br_bp, v1, v2, k1, k2)
                e = P * P + Q * Q - self.br_smax2
                _, dphi, _ = self._phi(e, self.br_beta)
                w = self.br_pen * dphi
                for loc in range(3):
                    u = 2.0 * (P * dP[loc] + Q * dQ[loc])
                    if loc == 0:
                        np.add.at(g_out, own, -w * u)
                    elif loc == 1:
                        np.add.at(g_out, oth, -w * u)
                    else:
                        np.add.at(g_out, self.B + own, -w * u)
                        np.add.at(g_out, self.B + oth, w * u)
        return g_out

    def constraints(self, x) -> np.ndarray:
        B = self.B
        out = np.concatenate([self.c_real, self.c_reac])
        v = x[:B]
        # devices: constants in c_real already carry the fixed block powers
        p_free = np.array([sum(x[c] for c in cols) for cols in self.free_block_of_device])
        q_dev = x[self.q_col]
        np.add.at(out, self._dev_bus, self._dev_sign * p_free)
        np.add.at(out, B + self._dev_bus, self._dev_sign * q_dev)
        # shunts
        if len(self.sh_bus):
            vb = v[self.sh_bus]
            np.add.at(out, self.sh_bus, -self.sh_g * vb * vb)
            np.add.at(out, B + self.sh_bus, self.sh_b * vb * vb)
        # branch flows leave their bus
        if len(self.br_from):
            vf, vt, dlt = self._sides(x)
            for own, v1, v2, d in ((self.br_from, vf, vt, dlt),
                                   (self.br_to, vt, vf, -dlt)):
                P, Q, _, _ = self._flow(self.br_g, self.br_b, self.br_bp, v1, v2, d)
                np.add.at(out, own, -P)
                np.add.at(out, B + own, -Q)
        # mismatch enters the real balance only
        out[:B] -= self.mismatch(x)
        return out

    # ---- jacobian
    def _build_jacobian_structure(self):
        B = self.B
        rows, cols = [], []
        # branch part: for each side, real then reactive, local col order
        for own, oth in ((self.br_from, self.br_to), (self.br_to, self.br_from)):
            for row_base in (0, B):
                for col_sel in ("v_own", "v_oth", "th_own", "th_oth"):
                    for k in range(len(own)):
                        rows.append(row_base + own[k])
                        if col_sel == "v_own":
                            cols.append(self.col_v(own[k]))
                        elif col_sel == "v_oth":
                            cols.append(self.col_v(oth[k]))
                        elif col_sel == "th_own":
                            cols.append(self.col_theta(own[k]))
                        else:
                            cols.append(self.col_theta(oth[k]))
        self._jac_nraw_branch = len(rows)
        const_vals = []
        # shunts
        for k in range(len(self.sh_bus)):
            i = self.sh_bus[k]
            if self.sh_g[k] != 0.0:
                rows.append(i)
                cols.append(self.col_v(i))
            if self.sh_b[k] != 0.0:
                rows.append(B + i)
                cols.append(self.col_v(i))
        # free blocks, q, mismatch: constant entries
        for j in range(self.D):
            for c in self.free_block_of_device[j]:
                rows.append(self._dev_bus[j])
                cols.append(c)
                const_vals.append(float(self._dev_sign[j]))
        for j in range(self.D):
            rows.append(B + self._dev_bus[j])
            cols.append(self.q_col[j])
            const_vals.append(float(self._dev_sign[j]))
        for i in range(B):
            rows.append(i)
            cols.append(self.col_mis_pos(i))
            const_vals.append(-1.0)
            rows.append(i)
            cols.append(self.col_mis_neg(i))
            const_vals.append(1.0)
        raw = np.stack([np.array(rows), np.array(cols)], axis=1)
        uniq, inverse = np.unique(raw, axis=0, return_inverse=True)
        self._jac_rows = uniq[:, 0].astype(int)
        self._jac_cols = uniq[:, 1].astype(int)
        self._jac_inverse = inverse.astype(int)
        self._jac_const = np.array(const_vals)

    def jac_structure(self):
        return self._jac_rows, self._jac_cols

    def jacobian(self, x) -> np.ndarray:
        raw = []
        if len(self.br_from):
            vf, vt, dlt = self._sides(x)
            for v1, v2, d in ((vf, vt, dlt), (vt, vf, -dlt)):
                P, Q, k1, k2 = self._flow(self.br_g, self.br_b, self.br_bp, v1, v2, d)
                dP, dQ = self._flow_grad(self.br_g, self.br_b, self.br_bp, v1, v2, k1, k2)
                for dfun in (dP, dQ):
                    raw.extend([-dfun[0], -dfun[1], -dfun[2], dfun[2]])
        shunt_vals = []
        v = x[: self.B]
        for k in range(len(self.sh_bus)):
            if self.sh_g[k] != 0.0:
                shunt_vals.append(-2.0 * self.sh_g[k] * v[self.sh_bus[k]])
            if self.sh_b[k] != 0.0:
                shunt_vals.append(2.0 * self.sh_b[k] * v[self.sh_bus[k]])
        raw_vals = (np.concatenate(raw + [np.array(shunt_vals), self._jac_const])
                    if raw else np.concatenate([np.array(shunt_vals), self._jac_const]))
        out = np.zeros(len(self._jac_rows))
        np.add.at(out, self._jac_inverse, raw_vals)
        return out

    # ---- hessian
    def _build_hessian_structure(self):
        slots: dict[tuple[int, int], int] = {}

        def slot(a, b):
            key = (a, b) if a >= b else (b, a)
            if key not in slots:
                slots[key] = len(slots)
            return slots[key]

        L = len(self.br_from)
        self._branch_gv = np.zeros((L, 4), dtype=int)
        for k in range(L):
            f, t = int(self.br_from[k]), int(self.br_to[k])
            gv = (self.col_v(f), self.col_v(t), self.col_theta(f), self.col_theta(t))
            self._branch_gv[k] = gv
            for a in range(4):
                for bidx in range(a + 1):
                    slot(gv[a], gv[bidx])
        for k in range(len(self.sh_bus)):
            i = int(self.sh_bus[k])
            slot(self.col_v(i), self.col_v(i))
        keys = sorted(slots.keys())
        self._hess_slot = {key: idx for idx, key in enumerate(keys)}
        self._hess_rows = np.array([k[0] for k in keys], dtype=int)
        self._hess_cols = np.array([k[1] for k in keys], dtype=int)

    def hess_structure(self):
        return self._hess_rows, self._hess_cols

    @staticmethod
    def _local_hess(g, bp, v1, v2, k1, k2):
        HP = np.array([[2 * g, -k1, v2 * k2],
                       [-k1, 0.0, v1 * k2],
                       [v2 * k2, v1 * k2, v1 * v2 * k1]])
        HQ = np.array([[-2 * bp, -k2, -v2 * k1],
                       [-k2, 0.0, -v1 * k1],
                       [-v2 * k1, -v1 * k1, v1 * v2 * k2]])
        return HP, HQ

    @staticmethod
    def _local_to_global4(Hloc, own_first: bool):
        """(v1, v2, d) block into (v_f, v_t, th_f, th_t) coordinates."""
        G = np.zeros((4, 4))
        if own_first:
            vo, vx, to, tx = 0, 1, 2, 3  # own = from side
        else:
            vo, vx, to, tx = 1, 0, 3, 2  # own = to side
        G[vo, vo] = Hloc[0, 0]
        G[vo, vx] = G[vx, vo] = Hloc[0, 1]
        G[vx, vx] = Hloc[1, 1]
        G[vo, to] = G[to, vo] = Hloc[0, 2]
        G[vo, tx] = G[tx, vo] = -Hloc[0, 2]
        G[vx, to] = G[to, vx] = Hloc[1, 2]
        G[vx, tx] = G[tx, vx] = -Hloc[1, 2]
        G[to, to] = Hloc[2, 2]
        G[to, tx] = G[tx, to] = -Hloc[2, 2]
        G[tx, tx] = Hloc[2, 2]
        return G

    def hessian(self, x, sigma: float, lam: np.ndarray) -> np.ndarray:
        B = self.B
        out = np.zeros(len(self._hess_rows))
        v = x[:B]
        th = x[B: 2 * B]
        for k in range(len(self.br_from)):
            f, t = int(self.br_from[k]), int(self.br_to[k])
            g, b, bp = self.br_g[k], self.br_b[k], self.br_bp[k]
            gv = self._branch_gv[k]
            G = np.zeros((4, 4))
            for own_first, v1, v2, d, row_own in (
                    (True, v[f], v[t], th[f] - th[t], f),
                    (False, v[t], v[f], th[t] - th[f], t)):
                P, Q, k1, k2 = self._flow(g, b, bp, v1, v2, d)
                HP, HQ = self._local_hess(g, bp, v1, v2, k1, k2)
                # constraint curvature: balance rows carry -P, -Q
                G += self._local_to_global4(-lam[row_own] * HP - lam[B + row_own] * HQ,
                                            own_first)
                # objective curvature: smooth overload penalty
                pen = self.br_pen[k]
                if pen != 0.0 and sigma != 0.0:
                    dP, dQ = self._flow_grad(g, b, bp, v1, v2, k1, k2)
                    e = P * P + Q * Q - self.br_smax2[k]
                    _, dphi, d2phi = self._phi(e, self.br_beta[k])
                    u = 2.0 * (P * np.array(dP) + Q * np.array(dQ))
                    Hp = (d2phi * np.outer(u, u)
                          + dphi * 2.0 * (np.outer(dP, dP) + P * HP
                                          + np.outer(dQ, dQ) + Q * HQ))
                    G += self._local_to_global4(-sigma * pen * Hp, own_first)
            for a in range(4):
                for bidx in range(a + 1):
                    key = (gv[a], gv[bidx]) if gv[a] >= gv[bidx] else (gv[bidx], gv[a])
                    out[self._hess_slot[key]] += G[a, bidx]
        for k in range(len(self.sh_bus)):
            i = int(self.sh_bus[k])
            key = (self.col_v(i), self.col_v(i))
            out[self._hess_slot[key]] += (lam[i] * (-2.0 * self.sh_g[k])
                                          + lam[B + i] * (2.0 * self.sh_b[k]))
        return out


def build_ac_stage(instance: Instance, t: int,
                   commitment: dict[str, int],
                   ramp_bounds: dict[str, tuple[float, float]] | None = None,
                   prior_dispatch: dict[str, tuple[int, float]] | None = None,
                   opened: set[str] | None = None) -> AcStage:
    """Assemble the interval-t NLP.

    commitment: device id -> on flag for t.  ramp_bounds: receding bound
    interval per device.  prior_dispatch: device id -> (on flag, power) at
    t-1 or the initial state.  Both optional for standalone use.
    """
    opened = opened or set()
    B = len(instance.buses)
    D = len(instance.devices)
    d_t = float(instance.time_grid.durations[t])
    c_p = instance.penalties.mismatch_penalty
    c_ov = instance.penalties.overload_penalty

    dev_bus = np.array([instance.bus_index[d.bus] for d in instance.devices], dtype=int)
    dev_sign = np.array([1.0 if d.kind == PRODUCER else -1.0 for d in instance.devices])

    warnings: list[str] = []
    classifications: list[list[BlockState]] = []
    dev_on = np.zeros(D, dtype=int)
    for j, dev in enumerate(instance.devices):
        on = int(commitment.get(dev.id, 0)) if commitment else 0
        dev_on[j] = on
        lo = float(dev.p_min[t])
        hi = float(dev.p_max[t])
        if ramp_bounds and dev.id in ramp_bounds:
            lo = max(lo, float(ramp_bounds[dev.id][0]))
            hi = min(hi, float(ramp_bounds[dev.id][1]))
        if prior_dispatch and dev.id in prior_dispatch and on:
            on_prev, p_prev = prior_dispatch[dev.id]
            if on_prev:
                lo = max(lo, p_prev - dev.ramp_down * d_t)
                hi = min(hi, p_prev + dev.ramp_up * d_t)
            else:
                hi = min(hi, dev.ramp_up * d_t + float(dev.p_min[t]))
        if on and lo > hi + 1e-9:
            warnings.append(f"{dev.id}: empty dispatch interval at t={t}, clamped")
            mid = min(max(float(dev.p_min[t]), (lo + hi) / 2), float(dev.p_max[t]))
            lo = hi = mid
        classifications.append(classify_blocks(dev, t, on, (lo, hi) if on else None))

    # layout: v, theta, free blocks, q, mis_pos, mis_neg
    free_cols: list[list[int]] = [[] for _ in range(D)]
    blk_lo, blk_hi, blk_obj = [], [], []
    p_fixed = np.zeros(D)
    obj_const = 0.0
    col = 2 * B
    for j, dev in enumerate(instance.devices):
        blocks = instance.devices[j].cost_blocks[t]
        for state in classifications[j]:
            price = blocks[state.m][1]
            coef = (price if dev.kind == CONSUMER else -price) * d_t
            if state.status == FREE:
                free_cols[j].append(col)
                blk_lo.append(state.lo)
                blk_hi.append(state.hi)
                blk_obj.append(coef)
                col += 1
            elif state.status == FIXED_AT_MAX:
                p_fixed[j] += state.hi
                obj_const += coef * state.hi
    F = col - 2 * B
    q_col = np.arange(2 * B + F, 2 * B + F + D)
    n = 4 * B + F + D

    x_lo = np.full(n, -math.inf)
    x_hi = np.full(n, math.inf)
    x0 = np.zeros(n)
    bus_ids = [b.id for b in instance.buses]
    for i, bus in enumerate(instance.buses):
        x_lo[i], x_hi[i] = bus.v_min, bus.v_max
        x0[i] = min(max(1.0, bus.v_min), bus.v_max)
        if bus.is_reference:
            x_lo[B + i] = x_hi[B + i] = 0.0
    for k in range(F):
        x_lo[2 * B + k], x_hi[2 * B + k] = blk_lo[k], blk_hi[k]
        x0[2 * B + k] = 0.5 * (blk_lo[k] + blk_hi[k])
    for j, dev in enumerate(instance.devices):
        c = q_col[j]
        if dev_on[j]:
            x_lo[c], x_hi[c] = float(dev.q_min[t]), float(dev.q_max[t])
        else:
            x_lo[c] = x_hi[c] = 0.0
        x0[c] = 0.5 * (x_lo[c] + x_hi[c])
    for i in range(B):
        x_lo[2 * B + F + D + i] = 0.0
        x_lo[3 * B + F + D + i] = 0.0

    obj_lin = np.zeros(n)
    for k in range(F):
        obj_lin[2 * B + k] = blk_obj[k]
    obj_lin[2 * B + F + D: n] = -c_p * d_t

    # constraint constants from fixed device powers
    c_real = np.zeros(B)
    c_reac = np.zeros(B)
    for j in range(D):
        c_real[dev_bus[j]] += dev_sign[j] * p_fixed[j]

    closed = [br for br in instance.branches
              if br.initial_closed and br.id not in opened]
    br_from = np.array([instance.bus_index[br.from_bus] for br in closed], dtype=int)
    br_to = np.array([instance.bus_index[br.to_bus] for br in closed], dtype=int)
    br_g = np.array([br.g for br in closed])
    br_b = np.array([br.b for br in closed])
    br_bp = np.array([br.b + br.b_ch / 2.0 for br in closed])
    br_smax2 = np.array([br.s_max ** 2 for br in closed])
    br_pen = np.full(len(closed), c_ov * d_t)
    # smoothing width keeps third derivatives tame so central differences
    # at h=1e-6 resolve the analytic derivatives everywhere
    br_beta = np.array([0.05 * (1.0 + br.s_max ** 2) for br in closed])

    sh_bus = np.array([instance.bus_index[s.bus] for s in instance.shunts], dtype=int)
    sh_g = np.array([float(s.g_sh[t]) for s in instance.shunts])
    sh_b = np.array([float(s.b_sh[t]) for s in instance.shunts])

    stage = AcStage(
        n=n, m=2 * B, sense="max", x_lo=x_lo, x_hi=x_hi, x0=x0,
        B=B, D=D, F=F, bus_ids=bus_ids,
        device_ids=[d.id for d in instance.devices],
        free_block_of_device=free_cols, q_col=q_col, p_fixed=p_fixed,
        dev_on=dev_on,
        obj_lin=obj_lin, obj_const=obj_const,
        br_from=br_from, br_to=br_to, br_g=br_g, br_b=br_b, br_bp=br_bp,
        br_smax2=br_smax2, br_pen=br_pen, br_beta=br_beta,
        c_real=c_real, c_reac=c_reac,
        sh_bus=sh_bus, sh_g=sh_g, sh_b=sh_b,
        warnings=warnings,
    )
    stage._dev_bus = dev_bus
    stage._dev_sign = dev_sign
    stage._build_jacobian_structure()
    stage._build_hessian_structure()
    return stage
