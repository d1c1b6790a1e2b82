"""Static model of the islanded microgrid: buses, lines, hybrid PV-battery DGs.

Physical quantities are kept in engineering units (kW, kvar, ohm, V, Ah).
Per-unit conversion uses the bases carried by the :class:`Microgrid`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any


class NetworkError(ValueError):
    """Raised when a network document or model violates the schema or invariants."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Bus:
    id: int
    p_load_rated: float = 0.0
    q_load_rated: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True)
class DroopParams:
    m_p: float  # Hz/kW
    n_q: float  # V/kvar
    f_n: float = 1.0  # p.u. of f_base
    v_n: float = 1.0  # p.u. of v_base

    @staticmethod
    def from_rad_s(m_p_rad_s_kw: float, n_q: float, f_n: float = 1.0, v_n: float = 1.0) -> "DroopParams":
        return DroopParams(m_p=m_p_rad_s_kw / (2.0 * math.pi), n_q=n_q, f_n=f_n, v_n=v_n)


@dataclass(frozen=True)
class PvArray:
    n_panels: int
    c1: float  # W per W/m^2
    c2: float  # W


@dataclass(frozen=True)
class BatteryPack:
    v_bat: float  # V
    c_rating: float  # Ah
    soc: float  # %
    soc_min: float = 10.0
    soc_max: float = 90.0

    @property
    def energy_kwh(self) -> float:
        return self.v_bat * self.c_rating / 1000.0


@dataclass(frozen=True)
class Dg:
    bus: int
    droop: DroopParams
    pv: PvArray
    battery: BatteryPack
    p_inv_max: float  # kW


@dataclass(frozen=True)
class Microgrid:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    dgs: tuple[Dg, ...]
    s_base: float = 100.0  # kVA
    v_base: float = 400.0  # V ph-ph
    f_base: float = 50.0  # Hz
    name: str = ""
    rated_load_total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "rated_load_total", float(sum(b.p_load_rated for b in self.buses)))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_dg(self) -> int:
        return len(self.dgs)

    @property
    def z_base(self) -> float:
        """Impedance base in ohm."""
        return self.v_base**2 / (self.s_base * 1000.0)

    def bus_index(self, bus_id: int) -> int:
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise KeyError(bus_id)

    def with_batteries(self, **changes) -> "Microgrid":
        """Copy with every battery pack updated, e.g. ``c_rating=200.0``."""
        dgs = tuple(
            Dg(d.bus, d.droop, d.pv, BatteryPack(**{**d.battery.__dict__, **changes}), d.p_inv_max)
            for d in self.dgs
        )
        return Microgrid(self.buses, self.lines, dgs, self.s_base, self.v_base, self.f_base, self.name)

    def with_droop(self, **changes) -> "Microgrid":
        dgs = tuple(
            Dg(d.bus, DroopParams(**{**d.droop.__dict__, **changes}), d.pv, d.battery, d.p_inv_max)
            for d in self.dgs
        )
        return Microgrid(self.buses, self.lines, dgs, self.s_base, self.v_base, self.f_base, self.name)

    # per-unit helpers
    def power_to_pu(self, kw):
        return kw / self.s_base

    def power_from_pu(self, pu):
        return pu * self.s_base

    def freq_to_pu(self, hz):
        return hz / self.f_base

    def freq_from_pu(self, pu):
        return pu * self.f_base

    def volt_to_pu(self, volts):
        return volts / self.v_base

    def volt_from_pu(self, pu):
        return pu * self.v_base

    def impedance_to_pu(self, ohm):
        return ohm / self.z_base

    def impedance_from_pu(self, pu):
        return pu * self.z_base

    def m_p_pu(self, dg: Dg) -> float:
        """Frequency droop slope in p.u. frequency per p.u. power."""
        return dg.droop.m_p * self.s_base / self.f_base

    def n_q_pu(self, dg: Dg) -> float:
        return dg.droop.n_q * self.s_base / self.v_base


def _connected(bus_ids, lines) -> bool:
    if not bus_ids:
        return True
    adj = {b: set() for b in bus_ids}
    for ln in lines:
        if ln.from_bus in adj and ln.to_bus in adj:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(adj)


def validate(mg: Microgrid) -> list[str]:
    """Return human-readable invariant violations; empty when the model is sound."""
    out: list[str] = []
    ids = [b.id for b in mg.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        out.append(f"duplicate bus ids {dup}")
    if ids and sorted(set(ids)) != list(range(1, len(set(ids)) + 1)):
        out.append("bus ids must be contiguous starting at 1")
    for b in mg.buses:
        if b.p_load_rated < 0 or b.q_load_rated < 0:
            out.append(f"bus {b.id}: negative load")
    idset = set(ids)
    for ln in mg.lines:
        tag = f"line {ln.from_bus}-{ln.to_bus}"
        if ln.from_bus == ln.to_bus:
            out.append(f"{tag}: self-loop")
        if ln.from_bus not in idset or ln.to_bus not in idset:
            out.append(f"{tag}: references unknown bus")
        if ln.r < 0 or ln.x < 0:
            out.append(f"{tag}: negative impedance")
        elif ln.r == 0 and ln.x == 0:
            out.append(f"{tag}: zero impedance")
    if not _connected(ids, mg.lines):
        out.append("graph disconnected")
    if not mg.dgs:
        out.append("at least one DG required")
    for k, d in enumerate(mg.dgs, start=1):
        if d.bus not in idset:
            out.append(f"DG {k}: bus {d.bus} does not exist")
        if not d.droop.m_p > 0:
            out.append("m_p must be positive")
        if d.droop.n_q < 0:
            out.append("n_q must be nonnegative")
        if not 0.9 <= d.droop.f_n <= 1.1:
            out.append(f"DG {k}: f_n out of [0.9, 1.1] p.u.")
        if not 0.9 <= d.droop.v_n <= 1.1:
            out.append(f"DG {k}: v_n out of [0.9, 1.1] p.u.")
        if d.pv.n_panels <= 0:
            out.append(f"DG {k}: n_panels must be positive")
        if d.pv.c1 <= 0:
            out.append(f"DG {k}: c1 must be positive")
        bat = d.battery
        if bat.v_bat <= 0 or bat.c_rating <= 0:
            out.append(f"DG {k}: battery voltage and capacity must be positive")
        if not bat.soc_min < bat.soc_max:
            out.append(f"DG {k}: soc_min must be below soc_max")
        elif not bat.soc_min <= bat.soc <= bat.soc_max:
            out.append(f"DG {k}: soc {bat.soc} outside [{bat.soc_min}, {bat.soc_max}]")
        if d.p_inv_max <= 0:
            out.append(f"DG {k}: p_inv_max must be positive")
    for name in ("s_base", "v_base", "f_base"):
        if getattr(mg, name) <= 0:
            out.append(f"{name} must be positive")
    return out


_DG_KEYS = ("bus", "m_p_rad_s_kw", "n_q", "v_n_pu", "n_panels", "c1", "c2", "v_bat",
            "c_rating_ah", "soc_init", "p_inv_max_kw")


def _require(obj: dict, keys, where: str):
    if not isinstance(obj, dict):
        raise NetworkError(f"{where}: expected an object")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise NetworkError(f"{where}: missing {', '.join(missing)}")


def network_from_dict(doc: dict[str, Any]) -> Microgrid:
    if not isinstance(doc, dict):
        raise NetworkError("network document must be an object")
    for section in ("buses", "lines", "dgs"):
        if not isinstance(doc.get(section), list):
            raise NetworkError(f"missing section '{section}'")
    bases = doc.get("bases", {})
    try:
        buses = []
        for k, b in enumerate(doc["buses"]):
            _require(b, ("id", "p_kw", "q_kvar"), f"buses[{k}]")
            buses.append(Bus(int(b["id"]), float(b["p_kw"]), float(b["q_kvar"])))
        lines = []
        for k, ln in enumerate(doc["lines"]):
            _require(ln, ("from", "to", "r_ohm", "x_ohm"), f"lines[{k}]")
            lines.append(Line(int(ln["from"]), int(ln["to"]), float(ln["r_ohm"]), float(ln["x_ohm"])))
        dgs = []
        for k, d in enumerate(doc["dgs"]):
            _require(d, _DG_KEYS, f"dgs[{k}]")
            droop = DroopParams.from_rad_s(float(d["m_p_rad_s_kw"]), float(d["n_q"]),
                                           float(d.get("f_n_pu", 1.0)), float(d["v_n_pu"]))
            pv = PvArray(int(d["n_panels"]), float(d["c1"]), float(d["c2"]))
            bat = BatteryPack(float(d["v_bat"]), float(d["c_rating_ah"]), float(d["soc_init"]),
                              float(d.get("soc_min", 10.0)), float(d.get("soc_max", 90.0)))
            dgs.append(Dg(int(d["bus"]), droop, pv, bat, float(d["p_inv_max_kw"])))
        mg = Microgrid(tuple(buses), tuple(lines), tuple(dgs),
                       s_base=float(bases.get("s_kva", 100.0)),
                       v_base=float(bases.get("v_ph_ph", 400.0)),
                       f_base=float(bases.get("f_hz", 50.0)),
                       name=str(doc.get("name", "")))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"malformed value: {exc}") from exc
    problems = validate(mg)
    if problems:
        raise NetworkError(problems)
    return mg


def load_network(config_text: str) -> Microgrid:
    """Parse a JSON network document and return a validated :class:`Microgrid`."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"not valid JSON: {exc}") from exc
    return network_from_dict(doc)


def network_to_dict(mg: Microgrid) -> dict[str, Any]:
    return {
        "name": mg.name,
        "bases": {"s_kva": mg.s_base, "v_ph_ph": mg.v_base, "f_hz": mg.f_base},
        "buses": [{"id": b.id, "p_kw": b.p_load_rated, "q_kvar": b.q_load_rated} for b in mg.buses],
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r_ohm": ln.r, "x_ohm": ln.x} for ln in mg.lines],
        "dgs": [
            {
                "bus": d.bus,
                "m_p_rad_s_kw": d.droop.m_p * 2.0 * math.pi,
                "n_q": d.droop.n_q,
                "v_n_pu": d.droop.v_n,
                "f_n_pu": d.droop.f_n,
                "n_panels": d.pv.n_panels,
                "c1": d.pv.c1,
                "c2": d.pv.c2,
                "v_bat": d.battery.v_bat,
                "c_rating_ah": d.battery.c_rating,
                "soc_init": d.battery.soc,
                "soc_min": d.battery.soc_min,
                "soc_max": d.battery.soc_max,
                "p_inv_max_kw": d.p_inv_max,
            }
            for d in mg.dgs
        ],
    }


def data_path(name: str):
    return resources.files("nnems") / "data" / name


def default_network() -> Microgrid:
    """The bundled CIGRE LV test feeder with three hybrid DGs on buses 1, 14 and 18."""
    return load_network(data_path("cigre_lv.json").read_text())
