import json
import os

import pytest

from mtscopf.generator import generate_instance
from mtscopf.instance import parse_instance

DATA = os.path.join(os.path.dirname(__file__), "data")


def data_path(name):
    return os.path.join(DATA, name)


def load_text(name):
    with open(data_path(name)) as fh:
        return fh.read()


def onebus_doc(p_min=0.0, c_p=2000.0, T=1):
    """Single-bus producer+consumer document used by the hand examples."""
    return {
        "header": {"name": "onebus", "horizon_hours": float(T), "base_mva": 100.0},
        "time_grid": {"count": T, "durations": 1.0},
        "buses": [{"id": "B1", "v_min": 0.95, "v_max": 1.05, "is_reference": True}],
        "shunts": [],
        "devices": [
            {"id": "G1", "bus": "B1", "kind": "producer", "p_min": p_min, "p_max": 5.0,
             "q_min": -1.0, "q_max": 1.0, "ramp_up": 10.0, "ramp_down": 10.0,
             "min_uptime": 1.0, "min_downtime": 1.0, "max_starts": 5, "on_cost": 0.0,
             "shutdown_cost": 0.0,
             "startup_categories": [{"downtime_lo": 1.0, "downtime_hi": None, "cost": 0.0}],
             "cost_blocks": [[5.0, 10.0]],
             "initial": {"status": 0, "duration_h": 100.0, "p": 0.0}},
            {"id": "D1", "bus": "B1", "kind": "consumer", "p_min": 3.0, "p_max": 3.0,
             "q_min": 0.0, "q_max": 0.0, "ramp_up": 10.0, "ramp_down": 10.0,
             "min_uptime": 1.0, "min_downtime": 1.0, "max_starts": 5, "on_cost": 0.0,
             "shutdown_cost": 0.0,
             "startup_categories": [{"downtime_lo": 1.0, "downtime_hi": None, "cost": 0.0}],
             "cost_blocks": [[3.0, 100.0]],
             "initial": {"status": 0, "duration_h": 100.0, "p": 0.0}}],
        "branches": [],
        "zones": [],
        "penalties": {"mismatch_penalty": c_p, "overload_penalty": 100.0},
    }


@pytest.fixture(scope="session")
def onebus():
    return parse_instance(json.dumps(onebus_doc()))


@pytest.fixture(scope="session")
def twobus():
    return parse_instance(load_text("twobus.json"))


@pytest.fixture(scope="session")
def case14():
    return parse_instance(load_text("case14.json"))


@pytest.fixture(scope="session")
def case5():
    return generate_instance(5, 8, 3)
