"""Shared fixtures. The month-long runs are built once per session."""

from __future__ import annotations

import time

import numpy as np
import pytest

from nnems.dataset import generate, split
from nnems.netmodel import BatteryPack, Bus, Dg, DroopParams, Line, Microgrid, PvArray, default_network
from nnems.neural import train_decentralized, train_lm
from nnems.profiles import synthesize_profile
from nnems.simloop import (CentralizedController, DecentralizedController, FixedController, bundled_scenario,
                           run)


def make_dg(bus: int, soc: float = 50.0, c_rating: float = 200.0) -> Dg:
    return Dg(bus, DroopParams.from_rad_s(0.005, 0.1), PvArray(232, 0.3072, -2.1944),
              BatteryPack(550.0, c_rating, soc), 100.0)


def symmetric_feeder(load_kw: float = 20.0) -> Microgrid:
    """Two identical DGs at the ends of a three-bus line, load in the middle."""
    buses = (Bus(1), Bus(2, load_kw, 0.5 * load_kw), Bus(3))
    lines = (Line(1, 2, 0.05, 0.02), Line(2, 3, 0.05, 0.02))
    return Microgrid(buses, lines, (make_dg(1), make_dg(3)), name="symmetric")


@pytest.fixture(scope="session")
def mg():
    return default_network()


@pytest.fixture(scope="session")
def month_profile():
    return synthesize_profile(31, 5, seed=0)


@pytest.fixture(scope="session")
def timings():
    """Wall-clock seconds of the expensive session fixtures, keyed by name."""
    return {}


@pytest.fixture(scope="session")
def banded_month(mg, month_profile, timings):
    start = time.perf_counter()
    ds = generate(mg, month_profile, banded=True, seed=0)
    timings["banded_month"] = time.perf_counter() - start
    return ds


@pytest.fixture(scope="session")
def fixed_month(mg, month_profile):
    return generate(mg, month_profile, banded=False, seed=0)


@pytest.fixture(scope="session")
def month_splits(banded_month):
    return split(banded_month, (0.8, 0.1, 0.1), seed=0)


@pytest.fixture(scope="session")
def central_fit(banded_month, month_splits, timings):
    tr, va, te = month_splits
    start = time.perf_counter()
    fit = train_lm(tr.inputs_targets(), va.inputs_targets(), 10, seed=0, test=te.inputs_targets(),
                   norm_data=banded_month.feasible().inputs_targets())
    timings["central_fit"] = time.perf_counter() - start
    return fit


@pytest.fixture(scope="session")
def local_fits(banded_month, month_splits):
    tr, va, te = month_splits
    return [train_decentralized(tr.inputs_targets(), va.inputs_targets(), i, 10, seed=0,
                                test=te.inputs_targets(), norm_data=banded_month.feasible().inputs_targets())
            for i in range(banded_month.n_dg)]


@pytest.fixture(scope="session")
def traces(mg, central_fit, local_fits):
    out = {}
    for name in ("charging", "discharging"):
        sc = bundled_scenario(name)
        out[name, "fixed"] = run(mg, sc, FixedController(np.full(mg.n_dg, mg.freq_to_pu(sc.fixed_f_n_hz))))
        out[name, "centralized"] = run(mg, sc, CentralizedController(central_fit[0]))
        out[name, "decentralized"] = run(mg, sc, DecentralizedController([m for m, _ in local_fits]))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
