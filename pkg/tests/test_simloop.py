import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnems.simloop import (FixedController, IrrEvent, LoadEvent, Scenario, ScenarioError, TimelineMismatch,
                           battery_spread, bundled_scenario, clamp_setpoints, compare, load_scenario, read_trace,
                           run, settled_mask, soc_dif)

from .conftest import symmetric_feeder


def two_dg_scenario(**kw) -> Scenario:
    base = dict(initial_soc=(50.0, 50.0), fixed_f_n_hz=50.0, irr_events=(IrrEvent(0.0, (500.0, 500.0)),),
                duration=2.0, ems_enable_time=1.0, name="pair")
    base.update(kw)
    return Scenario(**base)


def test_soc_dif_examples():
    dev, avg = soc_dif([10.0, 20.0, 30.0])
    assert avg == 20.0 and np.array_equal(dev, [-10.0, 0.0, 10.0])
    dev, avg = soc_dif([40.0, 40.0])
    assert avg == 40.0 and np.all(dev == 0)
    with pytest.raises(ValueError):
        soc_dif([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=8))
def test_soc_dif_sums_to_zero(soc):
    dev, avg = soc_dif(soc)
    assert abs(dev.sum()) <= 1e-9
    assert min(soc) - 1e-12 <= avg <= max(soc) + 1e-12


def test_symmetric_fixed_run_keeps_batteries_equal():
    mg = symmetric_feeder()
    tr = run(mg, two_dg_scenario(), FixedController(np.ones(2)))
    assert tr.truncated is None and len(tr) == 21
    assert np.allclose(tr.p_bat[:, 0], tr.p_bat[:, 1], atol=1e-9)
    assert np.allclose(tr.soc_dif, 0.0, atol=1e-12)


def test_trace_bookkeeping_is_exact(mg):
    sc = bundled_scenario("charging")
    tr = run(mg, sc, FixedController(np.full(3, mg.freq_to_pu(sc.fixed_f_n_hz))))
    assert np.array_equal(tr.p_bat, tr.p_inv - tr.p_pv)
    assert np.array_equal(tr.soc_dif, tr.soc - tr.soc.mean(axis=1, keepdims=True))
    assert np.all(tr.residual < 1e-8)
    assert np.array_equal(tr.soc[0], sc.initial_soc)


def test_charging_battery_soc_rises():
    mg = symmetric_feeder()
    sc = two_dg_scenario(irr_events=(IrrEvent(0.0, (900.0, 900.0)),), duration=1.0)
    tr = run(mg, sc, FixedController(np.ones(2)))
    assert np.all(tr.p_bat < 0)
    assert np.all(np.diff(tr.soc[:, 0]) > 0)


def test_load_event_applied_from_its_time():
    mg = symmetric_feeder()
    sc = two_dg_scenario(load_events=(LoadEvent(1.0, 2, 5.0, 0.0),))
    tr = run(mg, sc, FixedController(np.ones(2)))
    before, after = tr.p_inv[tr.t < 1.0 - 1e-9].sum(axis=1), tr.p_inv[tr.t >= 1.0 - 1e-9].sum(axis=1)
    assert after.min() - before.max() > 4.9
    assert tr.event_times == (1.0,)


def test_compare_self_is_zero(mg):
    sc = bundled_scenario("charging")
    tr = run(mg, sc, FixedController(np.full(3, mg.freq_to_pu(sc.fixed_f_n_hz))))
    out = compare(tr, tr)
    assert all(v["max"] == 0.0 and v["final"] == 0.0 for v in out["deltas"].values())
    assert out["soc_dif_reduction"] == pytest.approx(0.0)


def test_compare_rejects_other_timeline():
    mg = symmetric_feeder()
    a = run(mg, two_dg_scenario(), FixedController(np.ones(2)))
    b = run(mg, two_dg_scenario(duration=3.0), FixedController(np.ones(2)))
    with pytest.raises(TimelineMismatch):
        compare(a, b)


@pytest.mark.parametrize("kw, msg", [
    (dict(control_period=0.0), "control_period"),
    (dict(irr_events=(IrrEvent(1.0, (1.0, 1.0)),)), "t = 0"),
    (dict(irr_events=(IrrEvent(0.0, (1.0,)),)), "one value per DG"),
    (dict(irr_events=(IrrEvent(0.0, (1.0, 1.0)), IrrEvent(3.0, (1.0, 1.0)), IrrEvent(2.0, (1.0, 1.0)))),
     "time-ordered"),
])
def test_scenario_validation(kw, msg):
    with pytest.raises(ScenarioError, match=msg):
        two_dg_scenario(**kw)


def test_scenario_file_errors():
    with pytest.raises(ScenarioError, match="valid JSON"):
        load_scenario("{")
    with pytest.raises(ScenarioError, match="malformed"):
        load_scenario('{"initial_soc": [1, 2]}')


def test_arity_mismatch_rejected(mg):
    with pytest.raises(ScenarioError, match="arity"):
        run(mg, two_dg_scenario(), FixedController(np.ones(2)))


def test_clamp_shifts_in_common():
    assert np.array_equal(clamp_setpoints([1.0, 1.001]), [1.0, 1.001])
    shifted = clamp_setpoints([1.012, 1.0105])
    assert shifted.max() == pytest.approx(1.01, abs=1e-15)
    assert shifted[0] - shifted[1] == pytest.approx(0.0015, abs=1e-15)
    assert np.array_equal(clamp_setpoints([0.95, 1.05]), [0.99, 1.01])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.95, 1.05), min_size=1, max_size=5))
def test_clamp_lands_in_box(f_n):
    out = clamp_setpoints(f_n)
    assert np.all(out >= 0.99 - 1e-12) and np.all(out <= 1.01 + 1e-12)
    if np.ptp(f_n) <= 0.02:
        assert np.allclose(np.diff(out), np.diff(f_n), atol=1e-12)


def test_settled_mask_skips_transients():
    mg = symmetric_feeder()
    tr = run(mg, two_dg_scenario(duration=10.0, ems_enable_time=1.0,
                                 irr_events=(IrrEvent(0.0, (500.0, 500.0)), IrrEvent(5.0, (400.0, 500.0)))),
             FixedController(np.ones(2)))
    tr.ems_enable_time = 1.0
    m = settled_mask(tr)
    assert not m[tr.t < 4.0 - 1e-9].any()
    assert not m[(tr.t >= 5.0) & (tr.t < 8.0 - 1e-9)].any()
    assert m[(tr.t >= 4.0) & (tr.t < 5.0 - 1e-9)].all() and m[tr.t >= 8.0].all()


def test_spread_zero_for_equal_batteries():
    mg = symmetric_feeder()
    tr = run(mg, two_dg_scenario(), FixedController(np.ones(2)))
    assert np.all(battery_spread(tr) < 1e-9)


def test_trace_csv_round_trip(mg):
    sc = bundled_scenario("discharging")
    tr = run(mg, sc, FixedController(np.full(3, mg.freq_to_pu(sc.fixed_f_n_hz))))
    again = read_trace(tr.to_csv())
    assert np.array_equal(again.soc, tr.soc) and np.array_equal(again.f_n, tr.f_n)
    assert again.to_csv() == tr.to_csv()
    with pytest.raises(ValueError):
        read_trace("t_s,f_pu\n")
