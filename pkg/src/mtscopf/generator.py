"""Synthetic desk-scale instance generator.

Builds connected networks with a spanning tree plus extra branches (some
parallel, occasionally with outlier reactance so the line-switching
heuristic has work to do), committable producers and consumers with block
offer curves, one reserve zone, and dominance-satisfying penalties.
Deterministic for a given (buses, intervals, seed).
"""
from __future__ import annotations

import json

import numpy as np

from .instance import Instance, parse_instance


def generate_document(buses: int, intervals: int, seed: int) -> dict:
    if buses < 2:
        raise ValueError("need at least 2 buses")
    if intervals < 1:
        raise ValueError("need at least 1 interval")
    rng = np.random.default_rng(seed)
    T = intervals

    bus_ids = [f"B{i + 1}" for i in range(buses)]
    bus_docs = [{
        "id": b,
        "v_min": 0.94,
        "v_max": 1.06,
        "is_reference": i == 0,
    } for i, b in enumerate(bus_ids)]

    # spanning tree, then extras; every third extra doubles an existing edge
    # to create a parallel group, and half of those get an outlier reactance
    edges = []
    branch_docs = []

    def add_branch(f, t, x_val, s_cap):
        k = len(branch_docs)
        branch_docs.append({
            "id": f"L{k + 1}",
            "from_bus": f,
            "to_bus": t,
            "r": round(float(rng.uniform(0.005, 0.03)), 6),
            "x": round(float(x_val), 6),
            "b_ch": round(float(rng.uniform(0.0, 0.02)), 6),
            "s_max": round(float(s_cap), 6),
            "switchable": True,
            "initial_closed": True,
        })
        edges.append((f, t))

    for i in range(1, buses):
        j = int(rng.integers(0, i))
        add_branch(bus_ids[j], bus_ids[i], rng.uniform(0.05, 0.25), rng.uniform(1.2, 2.5))

    n_extra = buses // 2
    for k in range(n_extra):
        if k % 3 == 0 and edges:
            f, t = edges[int(rng.integers(0, len(edges)))]
            base_x = next(b["x"] for b in branch_docs
                          if {b["from_bus"], b["to_bus"]} == {f, t})
            x_val = base_x * 4.0 if k % 6 == 0 else base_x * rng.uniform(0.9, 1.1)
            add_branch(f, t, x_val, rng.uniform(0.8, 1.5))
        else:
            f, t = rng.choice(buses, size=2, replace=False)
            add_branch(bus_ids[int(f)], bus_ids[int(t)], rng.uniform(0.05, 0.25),
                       rng.uniform(0.8, 1.5))

    n_prod = max(2, buses // 4)
    n_cons = max(1, buses // 5)
    prod_buses = rng.choice(buses, size=min(n_prod, buses), replace=False)
    cons_buses = rng.choice(buses, size=min(n_cons, buses), replace=False)

    device_docs = []
    total_cap = 0.0
    for g, bi in enumerate(prod_buses):
        cap = float(rng.uniform(0.6, 1.5))
        total_cap += cap
        p_min = round(cap * float(rng.uniform(0.1, 0.3)), 4)
        base_price = float(rng.uniform(8.0, 40.0))
        first_q = round(cap * 0.6, 4)
        blocks = [
            [first_q, round(base_price, 4)],
            [round(round(cap, 4) - first_q, 4), round(base_price * rng.uniform(1.3, 2.0), 4)],
        ]
        initially_on = g == 0
        device_docs.append({
            "id": f"G{g + 1}",
            "bus": bus_ids[int(bi)],
            "kind": "producer",
            "p_min": p_min,
            "p_max": round(cap, 4),
            "q_min": round(-0.5 * cap, 4),
            "q_max": round(0.7 * cap, 4),
            "ramp_up": round(cap * 0.6, 4),
            "ramp_down": round(cap * 0.6, 4),
            "min_uptime": 2.0,
            "min_downtime": 2.0,
            "max_starts": 3,
            "on_cost": round(float(rng.uniform(0.5, 3.0)), 4),
            "shutdown_cost": round(float(rng.uniform(1.0, 6.0)), 4),
            "startup_categories": [
                {"downtime_lo": 2.0, "downtime_hi": 6.0, "cost": round(float(rng.uniform(4.0, 12.0)), 4)},
                {"downtime_lo": 6.0, "downtime_hi": None, "cost": round(float(rng.uniform(15.0, 40.0)), 4)},
            ],
            "cost_blocks": blocks,
            "energy_windows": [
                {"t_start": 0, "t_end": T - 1, "e_min": 0.0, "e_max": round(cap * T, 4)}
            ] if g == 0 else [],
            "initial": {"status": 1, "duration_h": 12.0, "p": p_min} if initially_on
                       else {"status": 0, "duration_h": 24.0, "p": 0.0},
        })

    # shape demand to at most ~60% of capacity so serving it is attractive
    demand_budget = 0.6 * total_cap / max(1, len(cons_buses))
    for c, bi in enumerate(cons_buses):
        cap = float(rng.uniform(0.5, 1.0)) * demand_budget
        benefit = float(rng.uniform(80.0, 150.0))
        first_q = round(cap * 0.7, 4)
        blocks = [
            [first_q, round(benefit, 4)],
            [round(round(cap, 4) - first_q, 4), round(benefit * rng.uniform(0.4, 0.8), 4)],
        ]
        device_docs.append({
            "id": f"D{c + 1}",
            "bus": bus_ids[int(bi)],
            "kind": "consumer",
            "p_min": 0.0,
            "p_max": round(cap, 4),
            "q_min": 0.0,
            "q_max": round(0.35 * cap, 4),
            "ramp_up": round(cap, 4),
            "ramp_down": round(cap, 4),
            "min_uptime": 1.0,
            "min_downtime": 1.0,
            "max_starts": max(2, T // 2),
            "on_cost": 0.0,
            "shutdown_cost": 0.0,
            "startup_categories": [{"downtime_lo": 1.0, "downtime_hi": None, "cost": 0.0}],
            "cost_blocks": blocks,
            "energy_windows": [],
            "initial": {"status": 0, "duration_h": 24.0, "p": 0.0},
        })

    shunt_docs = []
    if buses >= 4:
        bi = int(rng.integers(1, buses))
        shunt_docs.append({
            "id": "SH1",
            "bus": bus_ids[bi],
            "g_sh": round(float(rng.uniform(0.001, 0.01)), 6),
            "b_sh": round(float(rng.uniform(0.0, 0.05)), 6),
        })

    zone_docs = [{
        "id": "Z1",
        "buses": bus_ids,
        "req_up": round(0.05 * total_cap, 4),
        "req_down": round(0.03 * total_cap, 4),
        "shortfall_penalty": 300.0,
    }]

    return {
        "header": {"name": f"synth{buses}_{T}", "horizon_hours": float(T), "base_mva": 100.0},
        "time_grid": {"count": T, "durations": 1.0},
        "buses": bus_docs,
        "shunts": shunt_docs,
        "devices": device_docs,
        "branches": branch_docs,
        "zones": zone_docs,
        "penalties": {"mismatch_penalty": 2000.0, "overload_penalty": 250.0},
    }


def generate_text(buses: int, intervals: int, seed: int) -> str:
    return json.dumps(generate_document(buses, intervals, seed), indent=1)


def generate_instance(buses: int, intervals: int, seed: int) -> Instance:
    return parse_instance(generate_text(buses, intervals, seed))
