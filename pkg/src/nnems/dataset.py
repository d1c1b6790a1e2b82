"""Month-long sequential OPF runs that produce the controller training data."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .netmodel import Microgrid, network_to_dict
from .opf import (DEFAULT_LIMITS, FnBand, OpfLimits, OpfStepInput, SocState, dsoc_matrix, fn_band,
                  solve_step)
from .powerflow import PowerFlowError
from .profiles import Profile

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetRow:
    t: int
    p_pv: np.ndarray
    f: float
    f_n: np.ndarray
    soc: np.ndarray
    p_bat: np.ndarray
    err_max: float
    feasible: bool
    p_loss: float = float("nan")

    @property
    def p_inv(self) -> np.ndarray:
        return self.p_bat + self.p_pv


@dataclass
class Dataset:
    rows: list[DatasetRow]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    @property
    def n_dg(self) -> int:
        return len(self.rows[0].p_pv) if self.rows else 0

    def feasible(self) -> "Dataset":
        return Dataset([r for r in self.rows if r.feasible], dict(self.metadata))

    def arrays(self) -> dict[str, np.ndarray]:
        rows = self.rows
        return {
            "t": np.array([r.t for r in rows], dtype=int),
            "p_pv": np.array([r.p_pv for r in rows]).reshape(len(rows), -1),
            "f": np.array([r.f for r in rows]),
            "f_n": np.array([r.f_n for r in rows]).reshape(len(rows), -1),
            "soc": np.array([r.soc for r in rows]).reshape(len(rows), -1),
            "p_bat": np.array([r.p_bat for r in rows]).reshape(len(rows), -1),
            "err_max": np.array([r.err_max for r in rows]),
            "feasible": np.array([r.feasible for r in rows], dtype=bool),
            "p_loss": np.array([r.p_loss for r in rows]),
        }

    def inputs_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Controller training pairs: (p_pv per DG, f) -> f_n per DG."""
        a = self.arrays()
        return np.column_stack([a["p_pv"], a["f"]]), a["f_n"]

    def header(self) -> list[str]:
        n = self.n_dg
        cols = ["t"]
        for name in ("p_pv", "f", "f_n", "soc", "p_bat"):
            cols += [name] if name == "f" else [f"{name}_{i + 1}" for i in range(n)]
        return cols + ["err_max", "feasible"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow([r.t, *map(repr, map(float, r.p_pv)), repr(float(r.f)), *map(repr, map(float, r.f_n)),
                        *map(repr, map(float, r.soc)), *map(repr, map(float, r.p_bat)),
                        repr(float(r.err_max)), int(r.feasible)])
        return buf.getvalue()


def read_dataset(csv_text: str, metadata: dict | None = None) -> Dataset:
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        raise DatasetError("empty dataset file")
    header = rows[0]
    n = sum(1 for h in header if h.startswith("p_pv_"))
    if n == 0 or len(header) != 4 * n + 4:
        raise DatasetError("unrecognized dataset header")
    out = []
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DatasetError(f"row {k}: expected {len(header)} fields")
        v = [float(x) for x in r]
        out.append(DatasetRow(t=int(v[0]), p_pv=np.array(v[1:1 + n]), f=v[1 + n],
                              f_n=np.array(v[2 + n:2 + 2 * n]), soc=np.array(v[2 + 2 * n:2 + 3 * n]),
                              p_bat=np.array(v[2 + 3 * n:2 + 4 * n]), err_max=v[2 + 4 * n],
                              feasible=bool(int(v[3 + 4 * n]))))
    return Dataset(out, metadata or {})


def network_hash(mg: Microgrid) -> str:
    blob = json.dumps(network_to_dict(mg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def generate(mg: Microgrid, profile: Profile, initial_soc=None, banded: bool = True, *,
             high_load_band: str = "bottom", limits: OpfLimits = DEFAULT_LIMITS,
             seed: int | None = None, progress=None) -> Dataset:
    """Run the OPF over every profile step, chaining the SoC from one step to the next.

    With ``banded`` the setpoints of each step are confined to the band picked
    by the load level normalized to the horizon peak; otherwise the fixed
    bounds [0.99, 1.01] apply to every step.
    """
    if len(profile) == 0:
        raise DatasetError("profile is empty")
    if profile.n_dg != mg.n_dg:
        raise DatasetError(f"profile has {profile.n_dg} irradiance series for {mg.n_dg} DGs")
    batteries = tuple(d.battery for d in mg.dgs)
    state = SocState.from_batteries(batteries, initial_soc)
    if not state.in_bounds:
        raise DatasetError(f"initial SoC {state.soc} outside battery limits")
    dt = profile.dt_hours
    peak = float(np.max(profile.load_mult))
    fixed = FnBand.fixed(limits.f_min, limits.f_max)
    rows: list[DatasetRow] = []
    f_n_prev, x_prev = None, None
    for k in range(len(profile)):
        lm = float(profile.load_mult[k])
        band = fn_band(lm / peak, high_load_band) if banded else fixed
        inp = OpfStepInput(mg, state, profile.irr[:, k], lm, dt)
        try:
            res = solve_step(inp, band, limits, f_n0=f_n_prev, x0=x_prev)
        except (PowerFlowError, ValueError) as exc:
            raise DatasetError(f"timestep {k}: {exc}") from exc
        rows.append(DatasetRow(t=k, p_pv=res.p_pv, f=res.op.f, f_n=res.f_n, soc=res.soc_next.soc,
                               p_bat=res.p_bat, err_max=res.err_max, feasible=res.feasible,
                               p_loss=res.p_loss))
        if not res.feasible:
            log.info("timestep %d infeasible: %s", k,
                     {n: v for n, v in res.violations.items() if v > 0})
        state = res.soc_next
        f_n_prev, x_prev = res.f_n, res.op.x
        if progress is not None:
            progress(k + 1, len(profile))
    meta = {
        "tool_version": __version__,
        "seed": seed,
        "network_hash": network_hash(mg),
        "banded": banded,
        "high_load_band": high_load_band if banded else None,
        "limits": limits.__dict__,
        "initial_soc": [float(s) for s in SocState.from_batteries(batteries, initial_soc).soc],
        "dt_minutes": profile.dt,
        "steps": len(profile),
        "peak_load_mult": peak,
        "infeasible_rows": int(sum(not r.feasible for r in rows)),
    }
    return Dataset(rows, meta)


def summarize(ds: Dataset) -> dict:
    """Summary statistics of a generated dataset; infeasible rows are excluded."""
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    good = ds.feasible() if any(r.feasible for r in ds.rows) else ds
    a = good.arrays()
    p_inv_sum = (a["p_bat"] + a["p_pv"]).sum(axis=1)
    spread = np.array([dsoc_matrix(s)[0].max() for s in a["soc"]]) if good.n_dg > 1 else np.zeros(len(good))
    f = a["f"]
    corr = float(np.corrcoef(f, p_inv_sum)[0, 1]) if np.std(f) > 0 and np.std(p_inv_sum) > 0 else float("nan")
    near_floor = float(np.mean(np.abs(f - 0.99) <= 0.002))
    return {
        "rows": len(ds),
        "feasible_rows": len(good),
        "p_pv_max": float(a["p_pv"].max()),
        "p_bat_min": float(a["p_bat"].min()),
        "p_bat_max": float(a["p_bat"].max()),
        "err_mean": float(np.mean(a["err_max"])),
        "err_max": float(np.max(a["err_max"])),
        "p_loss_max": float(np.nanmax(a["p_loss"])) if np.any(np.isfinite(a["p_loss"])) else float("nan"),
        "soc_min": a["soc"].min(axis=0).tolist(),
        "soc_max": a["soc"].max(axis=0).tolist(),
        "soc_final": a["soc"][-1].tolist(),
        "max_pairwise_dsoc": float(spread.max()),
        "frac_charging": float(np.mean(a["p_bat"].mean(axis=1) < 0)),
        "frac_discharging": float(np.mean(a["p_bat"].mean(axis=1) > 0)),
        "corr_f_p_inv": corr,
        "frac_f_near_floor": near_floor,
        "droop_lost": near_floor >= 0.9,
        "std": {
            "p_pv": a["p_pv"].std(axis=0).tolist(),
            "f": float(f.std()),
            "f_n": a["f_n"].std(axis=0).tolist(),
            "soc": a["soc"].std(axis=0).tolist(),
            "p_bat": a["p_bat"].std(axis=0).tolist(),
        },
    }


def split_sizes(n: int, fractions) -> list[int]:
    """Floor each share, then hand the remainder to the largest fractional parts."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be nonnegative and sum to 1")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    rem = n - int(sizes.sum())
    order = sorted(range(len(fr)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes.tolist()


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    """Random disjoint partition of the feasible rows."""
    good = [r for r in ds.rows if r.feasible]
    sizes = split_sizes(len(good), fractions)
    for s, fr in zip(sizes, fractions):
        if fr > 0 and s == 0:
            raise DatasetError("empty partition")
    perm = np.random.default_rng(seed).permutation(len(good))
    parts, start = [], 0
    for s in sizes:
        idx = np.sort(perm[start:start + s])
        parts.append(Dataset([good[i] for i in idx], dict(ds.metadata)))
        start += s
    return tuple(parts)
