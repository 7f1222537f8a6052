import copy
import json

import pytest

from gridcascade.grid import DATA_DIR, load_case


def bus(i, kind="load", p=0.0, q=0.0):
    return {"id": i, "kind": kind, "p_demand": p, "q_demand": q, "v_min": 0.95, "v_max": 1.05}


def line(i, f, t, r=0.01, x=0.02, s_max=5.0):
    return {"id": i, "from_bus": f, "to_bus": t, "resistance": r, "reactance": x, "s_max": s_max}


def two_bus_dict(load_mw=0.0):
    return {
        "buses": [bus(1, "slack"), bus(2, p=load_mw, q=0.5 * load_mw)],
        "lines": [line(1, 1, 2)],
        "dg_units": [],
        "smart_buildings": [],
        "microgrids": [],
        "price": 50.0,
        "lambda": 1.0,
        "base_mva": 100.0,
        "base_kv": 12.66,
    }


@pytest.fixture(scope="session")
def case33():
    return load_case("case33_sb.json")


@pytest.fixture(scope="session")
def case6():
    return load_case("case6_mini.json")


@pytest.fixture
def case33_dict():
    with open(DATA_DIR / "case33_sb.json") as fh:
        return json.load(fh)


def clone(d):
    return copy.deepcopy(d)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
