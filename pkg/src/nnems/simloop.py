"""Quasi-static closed-loop replay of irradiance and load scenarios."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Microgrid
from .neural import NnModel, forward
from .opf import SocFault, SocState, soc_update
from .powerflow import LoadSnapshot, PowerFlowError, solve_droop_pf
from .profiles import array_power

log = logging.getLogger(__name__)

F_N_MIN, F_N_MAX = 0.99, 1.01


class ScenarioError(ValueError):
    pass


class TimelineMismatch(ValueError):
    pass


@dataclass(frozen=True)
class IrrEvent:
    t: float
    irr: tuple[float, ...]


@dataclass(frozen=True)
class LoadEvent:
    t: float
    bus: int
    dp_kw: float
    dq_kvar: float


@dataclass(frozen=True)
class Scenario:
    initial_soc: tuple[float, ...]
    fixed_f_n_hz: float
    irr_events: tuple[IrrEvent, ...]
    load_mult: float = 1.0
    load_events: tuple[LoadEvent, ...] = ()
    control_period: float = 0.1
    duration: float = 40.0
    ems_enable_time: float = 6.0
    soc_time_scale: float = 30.0
    c_rating_ah: float | None = 200.0
    name: str = ""

    def __post_init__(self):
        if self.control_period <= 0:
            raise ScenarioError("control_period must be positive")
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.soc_time_scale <= 0:
            raise ScenarioError("soc_time_scale must be positive")
        if not self.irr_events or self.irr_events[0].t > 0:
            raise ScenarioError("irradiance must be given from t = 0")
        for events in (self.irr_events, self.load_events):
            times = [e.t for e in events]
            if times != sorted(times):
                raise ScenarioError("events must be time-ordered")
        n = len(self.initial_soc)
        if any(len(e.irr) != n for e in self.irr_events):
            raise ScenarioError("irradiance events must have one value per DG")

    @property
    def n_dg(self) -> int:
        return len(self.initial_soc)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.control_period))

    def irr_at(self, t: float) -> np.ndarray:
        cur = self.irr_events[0].irr
        for e in self.irr_events:
            if e.t <= t + 1e-9:
                cur = e.irr
        return np.array(cur, dtype=float)

    def loads_at(self, mg: Microgrid, t: float) -> LoadSnapshot:
        snap = LoadSnapshot.rated(mg, self.load_mult)
        for e in self.load_events:
            if e.t <= t + 1e-9:
                snap = snap.add(mg, e.bus, e.dp_kw, e.dq_kvar)
        return snap


def scenario_from_dict(d: dict) -> Scenario:
    try:
        return Scenario(
            initial_soc=tuple(float(s) for s in d["initial_soc"]),
            fixed_f_n_hz=float(d["fixed_f_n_hz"]),
            irr_events=tuple(IrrEvent(float(e["t"]), tuple(float(v) for v in e["irr"])) for e in d["irr_events"]),
            load_mult=float(d.get("load_mult", 1.0)),
            load_events=tuple(LoadEvent(float(e["t"]), int(e["bus"]), float(e["dp_kw"]), float(e["dq_kvar"]))
                              for e in d.get("load_events", [])),
            control_period=float(d.get("control_period", 0.1)),
            duration=float(d.get("duration", 40.0)),
            ems_enable_time=float(d.get("ems_enable_time", 6.0)),
            soc_time_scale=float(d.get("soc_time_scale", 30.0)),
            c_rating_ah=None if d.get("c_rating_ah") is None else float(d["c_rating_ah"]),
            name=str(d.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def load_scenario(text: str) -> Scenario:
    try:
        return scenario_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc


def bundled_scenario(name: str) -> Scenario:
    from .netmodel import data_path
    return load_scenario(data_path(f"scenario_{name}.json").read_text())


# Controllers ---------------------------------------------------------------------

class FixedController:
    kind = "fixed"

    def __init__(self, f_n_pu):
        self.f_n = np.atleast_1d(np.asarray(f_n_pu, dtype=float))

    @property
    def n_dg(self) -> int:
        return len(self.f_n)

    def __call__(self, p_pv, f_prev) -> np.ndarray:
        return self.f_n.copy()


class CentralizedController:
    kind = "centralized"

    def __init__(self, model: NnModel):
        self.model = model

    @property
    def n_dg(self) -> int:
        return self.model.n_out

    def __call__(self, p_pv, f_prev) -> np.ndarray:
        return forward(self.model, np.append(p_pv, f_prev))


class DecentralizedController:
    kind = "decentralized"

    def __init__(self, models: list[NnModel]):
        if any(m.n_in != 2 or m.n_out != 1 for m in models):
            raise ValueError("decentralized models must map (p_pv_i, f) to f_n_i")
        self.models = list(models)

    @property
    def n_dg(self) -> int:
        return len(self.models)

    def __call__(self, p_pv, f_prev) -> np.ndarray:
        return np.array([forward(m, [p, f_prev])[0] for m, p in zip(self.models, p_pv)])


def clamp_setpoints(f_n, lo: float = F_N_MIN, hi: float = F_N_MAX) -> np.ndarray:
    """Bring setpoints into [lo, hi] by one common shift.

    A common offset leaves the inverter power split unchanged, so the
    differences that carry the balancing action survive. Only a spread wider
    than the box falls back to per-element clipping.
    """
    f_n = np.asarray(f_n, dtype=float)
    if np.ptp(f_n) > hi - lo:
        return np.clip(f_n, lo, hi)
    if f_n.min() < lo:
        return f_n + (lo - f_n.min())
    if f_n.max() > hi:
        return f_n - (f_n.max() - hi)
    return f_n


# Simulation ----------------------------------------------------------------------

def soc_dif(soc) -> tuple[np.ndarray, float]:
    """Per-DG deviation from the fleet-mean SoC, and that mean."""
    s = np.asarray(soc, dtype=float)
    if s.size == 0:
        raise ValueError("need at least one DG")
    avg = float(np.mean(s))
    return s - avg, avg


@dataclass
class SimTrace:
    t: np.ndarray
    f: np.ndarray
    f_n: np.ndarray  # (T, N)
    p_pv: np.ndarray
    p_inv: np.ndarray
    p_bat: np.ndarray
    soc: np.ndarray
    soc_avg: np.ndarray
    soc_dif: np.ndarray
    v_min: np.ndarray
    v: np.ndarray  # (T, n_bus)
    residual: np.ndarray
    clamped: np.ndarray  # (T,) bool, controller output was clamped
    controller: str = ""
    scenario: str = ""
    ems_enable_time: float = 0.0
    event_times: tuple[float, ...] = ()
    truncated: str | None = None
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    @property
    def n_dg(self) -> int:
        return self.p_pv.shape[1]

    def header(self) -> list[str]:
        n = self.n_dg
        cols = ["t_s", "f_pu"]
        for name in ("f_n", "p_pv", "p_inv", "p_bat", "soc"):
            cols += [f"{name}_{i + 1}" for i in range(n)]
        cols.append("soc_avg")
        cols += [f"soc_dif_{i + 1}" for i in range(n)]
        return cols + ["v_min"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for k in range(len(self)):
            vals = [self.t[k], self.f[k], *self.f_n[k], *self.p_pv[k], *self.p_inv[k], *self.p_bat[k],
                    *self.soc[k], self.soc_avg[k], *self.soc_dif[k], self.v_min[k]]
            w.writerow([repr(round(float(self.t[k]), 10))] + [repr(float(v)) for v in vals[1:]])
        return buf.getvalue()


def read_trace(csv_text: str) -> SimTrace:
    rows = list(csv.reader(io.StringIO(csv_text)))
    if len(rows) < 2:
        raise ValueError("trace file has no samples")
    header = rows[0]
    n = sum(1 for h in header if h.startswith("f_n_"))
    if n == 0 or len(header) != 6 * n + 4:
        raise ValueError("unrecognized trace header")
    a = np.array([[float(x) for x in r] for r in rows[1:]])
    if a.shape[1] != len(header):
        raise ValueError("ragged trace file")
    blk = lambda i: a[:, 2 + i * n:2 + (i + 1) * n]  # noqa: E731
    return SimTrace(t=a[:, 0], f=a[:, 1], f_n=blk(0), p_pv=blk(1), p_inv=blk(2), p_bat=blk(3), soc=blk(4),
                    soc_avg=a[:, 2 + 5 * n], soc_dif=a[:, 3 + 5 * n:3 + 6 * n], v_min=a[:, -1],
                    v=a[:, -1:], residual=np.zeros(len(a)), clamped=np.zeros(len(a), dtype=bool))


def run(mg: Microgrid, scenario: Scenario, controller) -> SimTrace:
    """Step the microgrid through ``scenario`` with ``controller`` in the loop.

    Before ``ems_enable_time`` every DG runs at the fixed baseline setpoint.
    From then on the controller maps (p_pv, previous-step f) to f_n; outputs
    outside [0.99, 1.01] p.u. are shifted back in (see :func:`clamp_setpoints`)
    and flagged. The baseline setpoint
    itself is passed through unclamped.
    """
    if controller.n_dg != mg.n_dg or scenario.n_dg != mg.n_dg:
        raise ScenarioError(f"controller/scenario arity does not match {mg.n_dg} DGs")
    if scenario.c_rating_ah is not None:
        mg = mg.with_batteries(c_rating=scenario.c_rating_ah)
    batteries = tuple(d.battery for d in mg.dgs)
    state = SocState.from_batteries(batteries, scenario.initial_soc)
    base = np.full(mg.n_dg, mg.freq_to_pu(scenario.fixed_f_n_hz))
    dt_h = scenario.control_period * scenario.soc_time_scale / 3600.0
    events = sorted({e.t for e in scenario.irr_events if e.t > 0} | {e.t for e in scenario.load_events})

    cols: dict[str, list] = {k: [] for k in ("t", "f", "f_n", "p_pv", "p_inv", "p_bat", "soc", "v", "res", "clamp")}
    truncated, diags = None, []
    f_prev, x_prev = None, None
    for k in range(scenario.n_steps + 1):
        t = k * scenario.control_period
        p_pv = np.array([array_power(g, d.pv) for g, d in zip(scenario.irr_at(t), mg.dgs)])
        clamped = False
        if controller.kind == "fixed" or t < scenario.ems_enable_time - 1e-9 or f_prev is None:
            f_n = base if controller.kind != "fixed" else controller(p_pv, f_prev)
        else:
            raw = controller(p_pv, f_prev)
            f_n = clamp_setpoints(raw)
            clamped = bool(np.any(f_n != raw))
            if clamped:
                diags.append(f"t={t:.1f}s: controller output {raw} clamped")
        try:
            op = solve_droop_pf(mg, f_n, scenario.loads_at(mg, t), x0=x_prev)
        except PowerFlowError as exc:
            truncated = f"t={t:.1f}s: {exc}"
            log.warning("trace truncated at %s", truncated)
            break
        p_bat = op.p_inv - p_pv
        cols["t"].append(t)
        cols["f"].append(op.f)
        cols["f_n"].append(np.array(f_n, dtype=float))
        cols["p_pv"].append(p_pv)
        cols["p_inv"].append(op.p_inv)
        cols["p_bat"].append(p_bat)
        cols["soc"].append(state.soc)
        cols["v"].append(op.v)
        cols["res"].append(op.residual)
        cols["clamp"].append(clamped)
        try:
            state = soc_update(state, p_bat, dt_h, batteries)
        except SocFault as exc:
            truncated = f"t={t:.1f}s: {exc}"
            break
        f_prev, x_prev = op.f, op.x

    soc = np.array(cols["soc"]).reshape(-1, mg.n_dg)
    dif = soc - soc.mean(axis=1, keepdims=True)
    v = np.array(cols["v"]).reshape(len(cols["t"]), -1)
    return SimTrace(
        t=np.array(cols["t"]), f=np.array(cols["f"]),
        f_n=np.array(cols["f_n"]).reshape(-1, mg.n_dg), p_pv=np.array(cols["p_pv"]).reshape(-1, mg.n_dg),
        p_inv=np.array(cols["p_inv"]).reshape(-1, mg.n_dg), p_bat=np.array(cols["p_bat"]).reshape(-1, mg.n_dg),
        soc=soc, soc_avg=soc.mean(axis=1), soc_dif=dif, v_min=v.min(axis=1) if v.size else np.array([]), v=v,
        residual=np.array(cols["res"]), clamped=np.array(cols["clamp"], dtype=bool),
        controller=controller.kind, scenario=scenario.name,
        ems_enable_time=scenario.ems_enable_time if controller.kind != "fixed" else float("inf"),
        event_times=tuple(events), truncated=truncated, diagnostics=diags,
    )


# Metrics -------------------------------------------------------------------------

def settled_mask(trace: SimTrace, window: float = 3.0) -> np.ndarray:
    """Samples at least ``window`` seconds after EMS enable and after every later event."""
    start = trace.ems_enable_time if np.isfinite(trace.ems_enable_time) else 0.0
    ok = trace.t >= start + window - 1e-9
    for ev in trace.event_times:
        if ev > start:
            ok &= ~((trace.t >= ev - 1e-9) & (trace.t < ev + window - 1e-9))
    return ok


def battery_spread(trace: SimTrace, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-sample max |p_bat,i - mean| over mean |p_bat|."""
    pb = trace.p_bat if mask is None else trace.p_bat[mask]
    dev = np.max(np.abs(pb - pb.mean(axis=1, keepdims=True)), axis=1)
    return dev / np.mean(np.abs(pb), axis=1)


def max_abs_soc_dif(trace: SimTrace) -> np.ndarray:
    return np.max(np.abs(trace.soc_dif), axis=1)


def divergence_slope(trace: SimTrace, t_from: float) -> float:
    """Least-squares slope of max|soc_dif| against time after ``t_from`` (% per s)."""
    m = trace.t >= t_from
    if m.sum() < 2:
        return 0.0
    return float(np.polyfit(trace.t[m], max_abs_soc_dif(trace)[m], 1)[0])


_SIGNALS = ("f", "f_n", "p_pv", "p_inv", "p_bat", "soc", "soc_avg", "soc_dif", "v_min")


def compare(a: SimTrace, b: SimTrace) -> dict:
    """Signal-by-signal differences and balancing metrics of two runs on one timeline."""
    if len(a) != len(b) or not np.allclose(a.t, b.t, atol=1e-9, rtol=0):
        raise TimelineMismatch("traces do not share a timeline")
    if a.n_dg != b.n_dg:
        raise TimelineMismatch("traces have different DG counts")
    deltas = {}
    for name in _SIGNALS:
        d = np.abs(np.asarray(getattr(a, name)) - np.asarray(getattr(b, name)))
        deltas[name] = {"max": float(d.max()) if d.size else 0.0, "final": float(np.max(d[-1])) if d.size else 0.0}
    t_from = min(a.event_times) if a.event_times else 0.0

    def metrics(tr: SimTrace) -> dict:
        sm = settled_mask(tr)
        spread = battery_spread(tr, sm) if sm.any() else np.array([np.nan])
        return {
            "final_max_abs_soc_dif": float(max_abs_soc_dif(tr)[-1]),
            "soc_dif_slope": divergence_slope(tr, t_from),
            "settled_p_bat_spread": float(np.max(spread)),
            "clamped_samples": int(np.sum(tr.clamped)),
        }

    ma, mb = metrics(a), metrics(b)
    fa, fb = ma["final_max_abs_soc_dif"], mb["final_max_abs_soc_dif"]
    return {"deltas": deltas, "a": ma, "b": mb,
            "soc_dif_reduction": (1.0 - fb / fa) if fa > 0 else float("nan")}
