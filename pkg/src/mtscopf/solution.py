"""Solution container and its serialization.

A solution document has a top-level ``objective`` breakdown map, an optional
``meta`` section (flags, timings, progress log) and a ``timesteps`` array of
per-entity records keyed by id.  ``read_solution(write_solution(s))`` is an
exact field-for-field round trip.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .instance import Instance

OBJECTIVE_KEYS = (
    "consumer_benefit", "producer_cost", "startup_cost", "on_cost",
    "shutdown_cost", "mismatch_penalty", "overload_penalty",
    "reserve_shortfall_penalty", "total",
)


class SolutionShapeError(Exception):
    """Solution arrays do not match the instance dimensions."""


@dataclass
class Solution:
    """Per-timestep dispatch plus the objective breakdown.

    Array shapes: device arrays are (T, D), bus arrays (T, B), branch
    arrays (T, L).  ``on``/``start``/``stop``/``closed`` carry 0/1 ints.
    """
    device_ids: list[str]
    bus_ids: list[str]
    branch_ids: list[str]
    p: np.ndarray
    q: np.ndarray
    on: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    reserve_up: np.ndarray
    reserve_down: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    closed: np.ndarray
    objective: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.p.shape[0]

    @classmethod
    def zeros(cls, instance: Instance) -> "Solution":
        T = instance.T
        D = len(instance.devices)
        B = len(instance.buses)
        L = len(instance.branches)
        return cls(
            device_ids=[d.id for d in instance.devices],
            bus_ids=[b.id for b in instance.buses],
            branch_ids=[b.id for b in instance.branches],
            p=np.zeros((T, D)), q=np.zeros((T, D)),
            on=np.zeros((T, D), dtype=int), start=np.zeros((T, D), dtype=int),
            stop=np.zeros((T, D), dtype=int),
            reserve_up=np.zeros((T, D)), reserve_down=np.zeros((T, D)),
            v=np.ones((T, B)), theta=np.zeros((T, B)),
            closed=np.array([[1 if br.initial_closed else 0 for br in instance.branches]] * T, dtype=int)
            if L else np.zeros((T, 0), dtype=int),
            objective={k: 0.0 for k in OBJECTIVE_KEYS},
        )

    def check_shapes(self, instance: Instance):
        T = instance.T
        D = len(instance.devices)
        B = len(instance.buses)
        L = len(instance.branches)
        expect = {
            "p": (T, D), "q": (T, D), "on": (T, D), "start": (T, D), "stop": (T, D),
            "reserve_up": (T, D), "reserve_down": (T, D),
            "v": (T, B), "theta": (T, B), "closed": (T, L),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise SolutionShapeError(f"{name}: expected shape {shape}, got {got}")
        if self.device_ids != [d.id for d in instance.devices]:
            raise SolutionShapeError("device id list does not match instance")
        if self.bus_ids != [b.id for b in instance.buses]:
            raise SolutionShapeError("bus id list does not match instance")
        if self.branch_ids != [b.id for b in instance.branches]:
            raise SolutionShapeError("branch id list does not match instance")


def write_solution(solution: Solution, instance: Instance) -> str:
    """Serialize deterministically; raises SolutionShapeError on mismatch."""
    solution.check_shapes(instance)
    timesteps = []
    for t in range(solution.T):
        devices = {}
        for j, dev_id in enumerate(solution.device_ids):
            devices[dev_id] = {
                "p": float(solution.p[t, j]),
                "q": float(solution.q[t, j]),
                "on": int(solution.on[t, j]),
                "start": int(solution.start[t, j]),
                "stop": int(solution.stop[t, j]),
                "reserve_up": float(solution.reserve_up[t, j]),
                "reserve_down": float(solution.reserve_down[t, j]),
            }
        buses = {}
        for i, bus_id in enumerate(solution.bus_ids):
            buses[bus_id] = {"v": float(solution.v[t, i]), "theta": float(solution.theta[t, i])}
        branches = {}
        for k, br_id in enumerate(solution.branch_ids):
            branches[br_id] = {"closed": int(solution.closed[t, k])}
        timesteps.append({"devices": devices, "buses": buses, "branches": branches})
    doc = {
        "objective": {k: float(v) for k, v in solution.objective.items()},
        "meta": {"flags": list(solution.flags), **solution.meta},
        "timesteps": timesteps,
    }
    return json.dumps(doc, indent=1)


def read_solution(text: str, instance: Instance) -> Solution:
    """Inverse of write_solution."""
    doc = json.loads(text)
    timesteps = doc["timesteps"]
    T = len(timesteps)
    solution = Solution.zeros(instance)
    if T != instance.T:
        raise SolutionShapeError(f"timesteps: expected {instance.T}, got {T}")
    for t, rec in enumerate(timesteps):
        for j, dev_id in enumerate(solution.device_ids):
            d = rec["devices"][dev_id]
            solution.p[t, j] = d["p"]
            solution.q[t, j] = d["q"]
            solution.on[t, j] = d["on"]
            solution.start[t, j] = d["start"]
            solution.stop[t, j] = d["stop"]
            solution.reserve_up[t, j] = d["reserve_up"]
            solution.reserve_down[t, j] = d["reserve_down"]
        for i, bus_id in enumerate(solution.bus_ids):
            b = rec["buses"][bus_id]
            solution.v[t, i] = b["v"]
            solution.theta[t, i] = b["theta"]
        for k, br_id in enumerate(solution.branch_ids):
            solution.closed[t, k] = rec["branches"][br_id]["closed"]
    solution.objective = {k: float(v) for k, v in doc["objective"].items()}
    meta = dict(doc.get("meta", {}))
    solution.flags = list(meta.pop("flags", []))
    solution.meta = meta
    solution.check_shapes(instance)
    return solution


def solutions_equal(a: Solution, b: Solution) -> bool:
    """Exact field-for-field equality (bitwise on arrays)."""
    if (a.device_ids, a.bus_ids, a.branch_ids) != (b.device_ids, b.bus_ids, b.branch_ids):
        return False
    for name in ("p", "q", "on", "start", "stop", "reserve_up", "reserve_down", "v", "theta", "closed"):
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    return a.objective == b.objective and a.flags == b.flags and a.meta == b.meta
