import copy
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnems.netmodel import (DroopParams, NetworkError, default_network, load_network, network_to_dict,
                            validate)


@pytest.fixture
def doc():
    return network_to_dict(default_network())


def test_bundled_feeder_rated_load():
    mg = default_network()
    loads = {b.id: (b.p_load_rated, b.q_load_rated) for b in mg.buses if b.p_load_rated > 0}
    assert loads == {11: (1.62, 1.00), 15: (16.15, 10.01), 16: (6.52, 4.04), 17: (1.62, 1.00), 18: (7.08, 4.39)}
    assert mg.rated_load_total == pytest.approx(32.99, abs=1e-9)
    assert (mg.n_bus, len(mg.lines)) == (18, 17)
    assert [d.bus for d in mg.dgs] == [1, 14, 18]


def test_bundled_feeder_is_valid():
    assert validate(default_network()) == []


def test_zero_loads_accepted(doc):
    for b in doc["buses"]:
        b["p_kw"] = b["q_kvar"] = 0.0
    assert load_network(json.dumps(doc)).rated_load_total == 0.0


def test_self_loop_rejected(doc):
    doc["lines"].append({"from": 1, "to": 1, "r_ohm": 0.1, "x_ohm": 0.1})
    with pytest.raises(NetworkError, match="self-loop"):
        load_network(json.dumps(doc))


def test_zero_droop_slope_reported():
    mg = default_network().with_droop(m_p=0.0)
    assert "m_p must be positive" in validate(mg)


def test_missing_line_disconnects(doc):
    doc["lines"] = [ln for ln in doc["lines"] if 9 not in (ln["from"], ln["to"])]
    with pytest.raises(NetworkError) as exc:
        load_network(json.dumps(doc))
    assert "graph disconnected" in exc.value.violations


def test_duplicate_bus_and_unknown_dg_bus(doc):
    bad = copy.deepcopy(doc)
    bad["buses"].append(dict(bad["buses"][0]))
    with pytest.raises(NetworkError, match="duplicate"):
        load_network(json.dumps(bad))
    bad = copy.deepcopy(doc)
    bad["dgs"][0]["bus"] = 99
    with pytest.raises(NetworkError, match="bus 99"):
        load_network(json.dumps(bad))


def test_schema_violation_names_field(doc):
    del doc["dgs"][0]["v_bat"]
    with pytest.raises(NetworkError, match="v_bat"):
        load_network(json.dumps(doc))


def test_droop_slope_unit_conversion():
    d = DroopParams.from_rad_s(0.005, 0.1)
    assert d.m_p == pytest.approx(7.9577e-4, rel=1e-4)
    mg = default_network()
    # Hz/kW to p.u. frequency per p.u. power: m_p * S_base / f_base
    assert mg.m_p_pu(mg.dgs[0]) == pytest.approx(0.005 / (2 * math.pi) * 100.0 / 50.0, rel=1e-12)


def test_document_round_trip(doc):
    again = network_to_dict(load_network(json.dumps(doc)))
    assert again == doc


def test_connected_without_dgs():
    """The bus graph stays connected when DG placements are ignored."""
    mg = default_network()
    adj = {b.id: set() for b in mg.buses}
    for ln in mg.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen, todo = set(), [mg.buses[0].id]
    while todo:
        k = todo.pop()
        if k not in seen:
            seen.add(k)
            todo.extend(adj[k] - seen)
    assert seen == set(adj)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-6, max_value=1e6, allow_nan=False))
def test_per_unit_round_trip(value):
    mg = default_network()
    for to, back in ((mg.power_to_pu, mg.power_from_pu), (mg.freq_to_pu, mg.freq_from_pu),
                     (mg.volt_to_pu, mg.volt_from_pu), (mg.impedance_to_pu, mg.impedance_from_pu)):
        assert back(to(value)) == pytest.approx(value, rel=1e-12)
