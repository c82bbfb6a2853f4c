"""Domain data model: network instances, parsing and validation.

An instance is a single JSON document with top-level keys ``header``,
``time_grid``, ``buses``, ``shunts``, ``devices``, ``branches``, ``zones``
and ``penalties``.  Per-timestep fields (bounds, shunt admittances, cost
blocks, reserve requirements) may be given once and are broadcast across
the horizon.  All powers are per-unit on the instance base MVA, durations
and up/down times are hours, block prices are $ per p.u.-hour.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

PRODUCER = "producer"
CONSUMER = "consumer"


class InstanceError(Exception):
    """Base class for instance ingestion failures."""


class SchemaError(InstanceError):
    """Document structure is wrong: missing/mistyped field, bad JSON.

    Carries the JSON-ish path of the offending field.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SemanticError(InstanceError):
    """Document is well-formed but violates a model invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} violation(s): {lines}")


@dataclass
class Violation:
    entity: str
    rule: str
    observed: object

    def __str__(self):
        return f"[{self.entity}] {self.rule} (observed: {self.observed})"


@dataclass
class TimeGrid:
    count: int
    durations: np.ndarray  # hours, length == count

    @property
    def horizon(self) -> float:
        return float(np.sum(self.durations))

    def elapsed(self, s: int, t: int) -> float:
        """Hours between the start of interval s and the start of interval t."""
        return float(np.sum(self.durations[s:t]))


@dataclass
class Bus:
    id: str
    v_min: float
    v_max: float
    is_reference: bool = False


@dataclass
class Shunt:
    id: str
    bus: str
    g_sh: np.ndarray  # per-timestep conductance, p.u.
    b_sh: np.ndarray  # per-timestep susceptance, p.u.


@dataclass
class StartupCategory:
    downtime_lo: float  # hours, inclusive
    downtime_hi: float  # hours, exclusive; inf for the last category
    cost: float

    def contains(self, downtime: float) -> bool:
        return self.downtime_lo <= downtime < self.downtime_hi


@dataclass
class EnergyWindow:
    t_start: int  # first interval index, inclusive
    t_end: int  # last interval index, inclusive
    e_min: float  # p.u.-hours
    e_max: float


@dataclass
class InitialState:
    status: int  # 1 on, 0 off at horizon start
    duration_h: float  # how long the prior status has held
    p: float  # prior real power, p.u. (0 when off)


@dataclass
class Device:
    id: str
    bus: str
    kind: str  # producer | consumer
    p_min: np.ndarray  # per-timestep, p.u.
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    ramp_up: float  # p.u. per hour
    ramp_down: float
    min_uptime: float  # hours
    min_downtime: float
    max_starts: int
    on_cost: float  # $ per hour while committed
    shutdown_cost: float  # $ per stop event
    startup_categories: list[StartupCategory]
    cost_blocks: list[list[tuple[float, float]]]  # [t][m] -> (quantity_max, price)
    energy_windows: list[EnergyWindow] = field(default_factory=list)
    initial: InitialState = field(default_factory=lambda: InitialState(0, 1e9, 0.0))

    def startup_cost_for(self, downtime: float) -> float:
        for cat in self.startup_categories:
            if cat.contains(downtime):
                return cat.cost
        return self.startup_categories[-1].cost

    def startup_category_for(self, downtime: float) -> int:
        for k, cat in enumerate(self.startup_categories):
            if cat.contains(downtime):
                return k
        return len(self.startup_categories) - 1


@dataclass
class Branch:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_ch: float  # total charging susceptance
    s_max: float  # apparent-power limit, p.u.
    switchable: bool = False
    initial_closed: bool = True

    @property
    def g(self) -> float:
        return self.r / (self.r * self.r + self.x * self.x)

    @property
    def b(self) -> float:
        return -self.x / (self.r * self.r + self.x * self.x)


@dataclass
class ReserveZone:
    id: str
    buses: list[str]
    req_up: np.ndarray  # per-timestep requirement, p.u.
    req_down: np.ndarray
    shortfall_penalty: float  # $ per p.u.-hour


@dataclass
class Penalties:
    mismatch_penalty: float  # $ per p.u.-hour
    overload_penalty: float


@dataclass
class Header:
    name: str
    horizon_hours: float
    base_mva: float


@dataclass
class Instance:
    header: Header
    time_grid: TimeGrid
    buses: list[Bus]
    shunts: list[Shunt]
    devices: list[Device]
    branches: list[Branch]
    zones: list[ReserveZone]
    penalties: Penalties

    def __post_init__(self):
        self.bus_index = {b.id: i for i, b in enumerate(self.buses)}
        self.device_index = {d.id: i for i, d in enumerate(self.devices)}
        self.branch_index = {b.id: i for i, b in enumerate(self.branches)}

    @property
    def T(self) -> int:
        return self.time_grid.count

    @property
    def reference_bus(self) -> str:
        for b in self.buses:
            if b.is_reference:
                return b.id
        raise SemanticError([Violation("instance", "reference bus", "none")])

    def devices_at(self, bus_id: str) -> list[Device]:
        return [d for d in self.devices if d.bus == bus_id]

    def closed_branches(self, opened: set[str] | None = None) -> list[Branch]:
        opened = opened or set()
        return [b for b in self.branches if b.initial_closed and b.id not in opened]

    def max_block_price(self) -> float:
        worst = 0.0
        for d in self.devices:
            for blocks_t in d.cost_blocks:
                for _, price in blocks_t:
                    worst = max(worst, price)
        return worst


# ---------------------------------------------------------------------------
# parsing helpers

def _require(mapping, key, path):
    if not isinstance(mapping, dict):
        raise SchemaError(path, f"expected object, got {type(mapping).__name__}")
    if key not in mapping:
        raise SchemaError(f"{path}.{key}", "missing required field")
    return mapping[key]


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected number, got {type(value).__name__}")
    if not math.isfinite(value):
        raise SchemaError(path, f"expected finite number, got {value}")
    return float(value)


def _integer(value, path):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected integer, got {type(value).__name__}")
    return value


def _string(value, path):
    if not isinstance(value, str):
        raise SchemaError(path, f"expected string, got {type(value).__name__}")
    return value


def _boolean(value, path):
    if not isinstance(value, bool):
        raise SchemaError(path, f"expected boolean, got {type(value).__name__}")
    return value


def _per_timestep(value, T, path):
    """Scalar broadcast or explicit length-T list, as a float array."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full(T, float(value))
    if isinstance(value, list):
        if len(value) != T:
            raise SchemaError(path, f"per-timestep list has length {len(value)}, expected {T}")
        return np.array([_number(v, f"{path}[{i}]") for i, v in enumerate(value)])
    raise SchemaError(path, "expected number or per-timestep list")


def _blocks(value, T, path):
    """Cost blocks: list of [qty, price] pairs (broadcast) or list of such lists per t."""
    if not isinstance(value, list) or not value:
        raise SchemaError(path, "expected non-empty list of [quantity_max, marginal_price] pairs")

    def one_block_list(entry, p):
        out = []
        for m, pair in enumerate(entry):
            if not isinstance(pair, list) or len(pair) != 2:
                raise SchemaError(f"{p}[{m}]", "expected [quantity_max, marginal_price]")
            out.append((_number(pair[0], f"{p}[{m}][0]"), _number(pair[1], f"{p}[{m}][1]")))
        return out

    first = value[0]
    if isinstance(first, list) and first and isinstance(first[0], list):
        # per-timestep nesting
        if len(value) != T:
            raise SchemaError(path, f"per-timestep block list has length {len(value)}, expected {T}")
        return [one_block_list(entry, f"{path}[{t}]") for t, entry in enumerate(value)]
    blocks = one_block_list(value, path)
    return [list(blocks) for _ in range(T)]


def parse_instance(text: str) -> Instance:
    """Parse and fully validate an instance document.

    Raises SchemaError for structural problems (with the field path) and
    SemanticError when any model invariant is violated.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("$", "top level must be an object")

    header_doc = _require(doc, "header", "$")
    header = Header(
        name=_string(_require(header_doc, "name", "$.header"), "$.header.name"),
        horizon_hours=_number(_require(header_doc, "horizon_hours", "$.header"), "$.header.horizon_hours"),
        base_mva=_number(_require(header_doc, "base_mva", "$.header"), "$.header.base_mva"),
    )

    tg_doc = _require(doc, "time_grid", "$")
    count = _integer(_require(tg_doc, "count", "$.time_grid"), "$.time_grid.count")
    if count < 1:
        raise SchemaError("$.time_grid.count", f"must be >= 1, got {count}")
    durations = _per_timestep(_require(tg_doc, "durations", "$.time_grid"), count, "$.time_grid.durations")
    time_grid = TimeGrid(count=count, durations=durations)
    T = count

    buses = []
    for i, bd in enumerate(_require(doc, "buses", "$")):
        p = f"$.buses[{i}]"
        buses.append(Bus(
            id=_string(_require(bd, "id", p), f"{p}.id"),
            v_min=_number(_require(bd, "v_min", p), f"{p}.v_min"),
            v_max=_number(_require(bd, "v_max", p), f"{p}.v_max"),
            is_reference=_boolean(bd.get("is_reference", False), f"{p}.is_reference"),
        ))

    shunts = []
    for i, sd in enumerate(doc.get("shunts", [])):
        p = f"$.shunts[{i}]"
        shunts.append(Shunt(
            id=_string(_require(sd, "id", p), f"{p}.id"),
            bus=_string(_require(sd, "bus", p), f"{p}.bus"),
            g_sh=_per_timestep(_require(sd, "g_sh", p), T, f"{p}.g_sh"),
            b_sh=_per_timestep(_require(sd, "b_sh", p), T, f"{p}.b_sh"),
        ))

    devices = []
    for i, dd in enumerate(_require(doc, "devices", "$")):
        p = f"$.devices[{i}]"
        kind = _string(_require(dd, "kind", p), f"{p}.kind")
        if kind not in (PRODUCER, CONSUMER):
            raise SchemaError(f"{p}.kind", f"expected '{PRODUCER}' or '{CONSUMER}', got '{kind}'")
        cats = []
        for k, cd in enumerate(_require(dd, "startup_categories", p)):
            cp = f"{p}.startup_categories[{k}]"
            hi_raw = _require(cd, "downtime_hi", cp)
            hi = math.inf if hi_raw is None else _number(hi_raw, f"{cp}.downtime_hi")
            cats.append(StartupCategory(
                downtime_lo=_number(_require(cd, "downtime_lo", cp), f"{cp}.downtime_lo"),
                downtime_hi=hi,
                cost=_number(_require(cd, "cost", cp), f"{cp}.cost"),
            ))
        windows = []
        for k, wd in enumerate(dd.get("energy_windows", [])):
            wp = f"{p}.energy_windows[{k}]"
            windows.append(EnergyWindow(
                t_start=_integer(_require(wd, "t_start", wp), f"{wp}.t_start"),
                t_end=_integer(_require(wd, "t_end", wp), f"{wp}.t_end"),
                e_min=_number(_require(wd, "e_min", wp), f"{wp}.e_min"),
                e_max=_number(_require(wd, "e_max", wp), f"{wp}.e_max"),
            ))
        init_doc = _require(dd, "initial", p)
        initial = InitialState(
            status=_integer(_require(init_doc, "status", f"{p}.initial"), f"{p}.initial.status"),
            duration_h=_number(_require(init_doc, "duration_h", f"{p}.initial"), f"{p}.initial.duration_h"),
            p=_number(_require(init_doc, "p", f"{p}.initial"), f"{p}.initial.p"),
        )
        devices.append(Device(
            id=_string(_require(dd, "id", p), f"{p}.id"),
            bus=_string(_require(dd, "bus", p), f"{p}.bus"),
            kind=kind,
            p_min=_per_timestep(_require(dd, "p_min", p), T, f"{p}.p_min"),
            p_max=_per_timestep(_require(dd, "p_max", p), T, f"{p}.p_max"),
            q_min=_per_timestep(_require(dd, "q_min", p), T, f"{p}.q_min"),
            q_max=_per_timestep(_require(dd, "q_max", p), T, f"{p}.q_max"),
            ramp_up=_number(_require(dd, "ramp_up", p), f"{p}.ramp_up"),
            ramp_down=_number(_require(dd, "ramp_down", p), f"{p}.ramp_down"),
            min_uptime=_number(_require(dd, "min_uptime", p), f"{p}.min_uptime"),
            min_downtime=_number(_require(dd, "min_downtime", p), f"{p}.min_downtime"),
            max_starts=_integer(_require(dd, "max_starts", p), f"{p}.max_starts"),
            on_cost=_number(_require(dd, "on_cost", p), f"{p}.on_cost"),
            shutdown_cost=_number(_require(dd, "shutdown_cost", p), f"{p}.shutdown_cost"),
            startup_categories=cats,
            cost_blocks=_blocks(_require(dd, "cost_blocks", p), T, f"{p}.cost_blocks"),
            energy_windows=windows,
            initial=initial,
        ))

    branches = []
    for i, bd in enumerate(_require(doc, "branches", "$")):
        p = f"$.branches[{i}]"
        branches.append(Branch(
            id=_string(_require(bd, "id", p), f"{p}.id"),
            from_bus=_string(_require(bd, "from_bus", p), f"{p}.from_bus"),
            to_bus=_string(_require(bd, "to_bus", p), f"{p}.to_bus"),
            r=_number(_require(bd, "r", p), f"{p}.r"),
            x=_number(_require(bd, "x", p), f"{p}.x"),
            b_ch=_number(_require(bd, "b_ch", p), f"{p}.b_ch"),
            s_max=_number(_require(bd, "s_max", p), f"{p}.s_max"),
            switchable=_boolean(bd.get("switchable", False), f"{p}.switchable"),
            initial_closed=_boolean(bd.get("initial_closed", True), f"{p}.initial_closed"),
        ))

    zones = []
    for i, zd in enumerate(doc.get("zones", [])):
        p = f"$.zones[{i}]"
        zone_buses = _require(zd, "buses", p)
        if not isinstance(zone_buses, list):
            raise SchemaError(f"{p}.buses", "expected list of bus ids")
        zones.append(ReserveZone(
            id=_string(_require(zd, "id", p), f"{p}.id"),
            buses=[_string(b, f"{p}.buses[{j}]") for j, b in enumerate(zone_buses)],
            req_up=_per_timestep(_require(zd, "req_up", p), T, f"{p}.req_up"),
            req_down=_per_timestep(_require(zd, "req_down", p), T, f"{p}.req_down"),
            shortfall_penalty=_number(_require(zd, "shortfall_penalty", p), f"{p}.shortfall_penalty"),
        ))

    pen_doc = _require(doc, "penalties", "$")
    penalties = Penalties(
        mismatch_penalty=_number(_require(pen_doc, "mismatch_penalty", "$.penalties"), "$.penalties.mismatch_penalty"),
        overload_penalty=_number(_require(pen_doc, "overload_penalty", "$.penalties"), "$.penalties.overload_penalty"),
    )

    instance = Instance(header, time_grid, buses, shunts, devices, branches, zones, penalties)
    violations = validate(instance)
    if violations:
        raise SemanticError(violations)
    return instance


# ---------------------------------------------------------------------------
# validation

def _connected(bus_ids, edges) -> bool:
    if not bus_ids:
        return True
    adj = {b: set() for b in bus_ids}
    for f, t in edges:
        if f in adj and t in adj:
            adj[f].add(t)
            adj[t].add(f)
    seen = set()
    stack = [next(iter(bus_ids))]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(adj[b] - seen)
    return len(seen) == len(bus_ids)


def validate(instance: Instance) -> list[Violation]:
    """Check every model invariant; returns one record per breach."""
    out: list[Violation] = []
    T = instance.T
    tg = instance.time_grid

    if tg.count < 1:
        out.append(Violation("time_grid", "count >= 1", tg.count))
    if np.any(tg.durations <= 0):
        out.append(Violation("time_grid", "durations strictly positive", tg.durations.tolist()))
    if abs(tg.horizon - instance.header.horizon_hours) > 1e-9:
        out.append(Violation("time_grid", "sum of durations equals header horizon",
                             f"{tg.horizon} != {instance.header.horizon_hours}"))

    bus_ids = set()
    n_ref = 0
    for bus in instance.buses:
        if bus.id in bus_ids:
            out.append(Violation(bus.id, "unique bus id", bus.id))
        bus_ids.add(bus.id)
        if not (0 < bus.v_min <= bus.v_max):
            out.append(Violation(bus.id, "0 < v_min <= v_max", (bus.v_min, bus.v_max)))
        n_ref += bus.is_reference
    if n_ref != 1:
        out.append(Violation("instance", "exactly one reference bus", n_ref))

    for sh in instance.shunts:
        if sh.bus not in bus_ids:
            out.append(Violation(sh.id, "shunt bus exists", sh.bus))
        if not (np.all(np.isfinite(sh.g_sh)) and np.all(np.isfinite(sh.b_sh))):
            out.append(Violation(sh.id, "shunt admittance finite", "non-finite entry"))

    for dev in instance.devices:
        if dev.bus not in bus_ids:
            out.append(Violation(dev.id, "device bus exists", dev.bus))
        if np.any(dev.p_min < 0) or np.any(dev.p_min > dev.p_max):
            out.append(Violation(dev.id, "0 <= p_min <= p_max",
                                 (dev.p_min.tolist(), dev.p_max.tolist())))
        if np.any(dev.q_min > dev.q_max):
            out.append(Violation(dev.id, "q_min <= q_max", (dev.q_min.tolist(), dev.q_max.tolist())))
        if dev.ramp_up < 0 or dev.ramp_down < 0:
            out.append(Violation(dev.id, "ramp rates >= 0", (dev.ramp_up, dev.ramp_down)))
        cats = dev.startup_categories
        if not cats:
            out.append(Violation(dev.id, "startup categories nonempty", 0))
        else:
            if cats[0].downtime_lo > dev.min_downtime + 1e-12:
                out.append(Violation(dev.id, "startup categories cover [min_downtime, inf)",
                                     f"first lo {cats[0].downtime_lo} > min_downtime {dev.min_downtime}"))
            for a, b in zip(cats, cats[1:]):
                if abs(a.downtime_hi - b.downtime_lo) > 1e-12 or a.downtime_lo >= a.downtime_hi:
                    out.append(Violation(dev.id, "startup categories disjoint ascending contiguous",
                                         (a.downtime_lo, a.downtime_hi, b.downtime_lo)))
                    break
            if not math.isinf(cats[-1].downtime_hi):
                out.append(Violation(dev.id, "last startup category unbounded", cats[-1].downtime_hi))
        for t in range(T):
            blocks = dev.cost_blocks[t]
            prices = [price for _, price in blocks]
            if dev.kind == PRODUCER and prices != sorted(prices):
                out.append(Violation(dev.id, "producer blocks sorted by ascending price", prices))
                break
            if dev.kind == CONSUMER and prices != sorted(prices, reverse=True):
                out.append(Violation(dev.id, "consumer blocks sorted by descending benefit", prices))
                break
            if any(q < 0 for q, _ in blocks):
                out.append(Violation(dev.id, "block quantities nonnegative", blocks))
                break
            if sum(q for q, _ in blocks) < dev.p_max[t] - 1e-9:
                out.append(Violation(dev.id, "sum of block quantities >= p_max",
                                     (sum(q for q, _ in blocks), dev.p_max[t])))
                break
        for w in dev.energy_windows:
            if not (0 <= w.t_start <= w.t_end < T):
                out.append(Violation(dev.id, "energy window inside horizon", (w.t_start, w.t_end)))
            if w.e_min > w.e_max:
                out.append(Violation(dev.id, "energy window e_min <= e_max", (w.e_min, w.e_max)))
        if dev.initial.status not in (0, 1):
            out.append(Violation(dev.id, "initial status binary", dev.initial.status))

    branch_ids = set()
    for br in instance.branches:
        if br.id in branch_ids:
            out.append(Violation(br.id, "unique branch id", br.id))
        branch_ids.add(br.id)
        if br.from_bus not in bus_ids:
            out.append(Violation(br.id, "branch from_bus exists", br.from_bus))
        if br.to_bus not in bus_ids:
            out.append(Violation(br.id, "branch to_bus exists", br.to_bus))
        if br.from_bus == br.to_bus:
            out.append(Violation(br.id, "from_bus != to_bus", br.from_bus))
        if br.x == 0:
            out.append(Violation(br.id, "nonzero reactance", br.x))
        if br.s_max <= 0:
            out.append(Violation(br.id, "s_max > 0", br.s_max))

    closed_edges = [(b.from_bus, b.to_bus) for b in instance.branches
                    if b.initial_closed and b.from_bus in bus_ids and b.to_bus in bus_ids]
    if not _connected(bus_ids, closed_edges):
        out.append(Violation("instance", "initially-closed network connected", "disconnected"))

    for zone in instance.zones:
        for b in zone.buses:
            if b not in bus_ids:
                out.append(Violation(zone.id, "zone bus exists", b))
        if np.any(zone.req_up < 0) or np.any(zone.req_down < 0):
            out.append(Violation(zone.id, "reserve requirements >= 0",
                                 (zone.req_up.tolist(), zone.req_down.tolist())))

    worst_price = instance.max_block_price()
    if instance.penalties.mismatch_penalty <= worst_price:
        out.append(Violation("penalties", "penalty dominance: mismatch_penalty > max block price",
                             (instance.penalties.mismatch_penalty, worst_price)))
    if instance.penalties.overload_penalty < 0:
        out.append(Violation("penalties", "overload_penalty >= 0", instance.penalties.overload_penalty))

    return out
