"""Irradiance and load time series, and the linear PV panel model."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .netmodel import PvArray


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class PanelCurve:
    irr: np.ndarray  # W/m^2, strictly increasing
    p_panel: np.ndarray  # W

    def __post_init__(self):
        irr = np.asarray(self.irr, dtype=float)
        p = np.asarray(self.p_panel, dtype=float)
        if irr.shape != p.shape or irr.ndim != 1:
            raise ProfileError("irradiance and power samples must be 1-D and equally long")
        object.__setattr__(self, "irr", irr)
        object.__setattr__(self, "p_panel", p)

    def check(self) -> list[str]:
        out = []
        if np.any(np.diff(self.irr) <= 0):
            out.append("irradiance samples must be strictly increasing")
        if np.any(np.diff(self.p_panel) < 0):
            out.append("panel power must be nondecreasing")
        return out

    @classmethod
    def from_csv(cls, text: str) -> "PanelCurve":
        rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
        if not rows:
            raise ProfileError("empty panel curve")
        if not _is_number(rows[0][0]):
            rows = rows[1:]
        try:
            data = np.array([[float(r[0]), float(r[1])] for r in rows], dtype=float)
        except (ValueError, IndexError) as exc:
            raise ProfileError(f"malformed panel curve row: {exc}") from exc
        if data.size == 0:
            raise ProfileError("empty panel curve")
        return cls(data[:, 0], data[:, 1])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def fit_panel(curve: PanelCurve) -> tuple[float, float]:
    """Least-squares line ``p = c1 * irr + c2`` through the curve samples."""
    if len(curve.irr) < 2:
        raise ProfileError("need at least two samples to fit a line")
    if np.ptp(curve.irr) == 0:
        raise ProfileError("degenerate curve: all irradiance samples equal")
    c1, c2 = np.polyfit(curve.irr, curve.p_panel, 1)
    return float(c1), float(c2)


def panel_power(irr, c1: float, c2: float):
    """Panel output in W; clamped at zero so night-time gives exactly 0."""
    irr_arr = np.asarray(irr, dtype=float)
    if np.any(irr_arr < 0):
        raise ProfileError("irradiance must be nonnegative")
    p = np.where(irr_arr > 0, np.maximum(c1 * irr_arr + c2, 0.0), 0.0)
    return float(p) if p.ndim == 0 else p


def array_power(irr, pv: PvArray):
    """PV array output in kW."""
    p = panel_power(irr, pv.c1, pv.c2)
    return p * pv.n_panels / 1000.0


@dataclass(frozen=True)
class Profile:
    dt: float  # minutes
    irr: np.ndarray  # (n_dg, T) W/m^2
    load_mult: np.ndarray  # (T,) p.u. of rated load
    start: str = "2020-05-01T00:00:00"

    def __post_init__(self):
        irr = np.atleast_2d(np.asarray(self.irr, dtype=float))
        lm = np.asarray(self.load_mult, dtype=float)
        object.__setattr__(self, "irr", irr)
        object.__setattr__(self, "load_mult", lm)
        if irr.shape[1] != lm.shape[0]:
            raise ProfileError("irradiance and load series differ in length")
        if np.any(irr < 0):
            raise ProfileError("irradiance must be nonnegative")
        if np.any(lm <= 0):
            raise ProfileError("load multipliers must be positive")
        if self.dt <= 0:
            raise ProfileError("dt must be positive")

    def __len__(self):
        return self.load_mult.shape[0]

    @property
    def n_dg(self) -> int:
        return self.irr.shape[0]

    @property
    def dt_hours(self) -> float:
        return self.dt / 60.0

    def timestamps(self) -> list[str]:
        t0 = datetime.fromisoformat(self.start)
        step = timedelta(minutes=self.dt)
        return [(t0 + k * step).isoformat() for k in range(len(self))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_iso", *[f"irr_dg{i + 1}" for i in range(self.n_dg)], "load_mult"])
        for k, ts in enumerate(self.timestamps()):
            w.writerow([ts, *[repr(float(v)) for v in self.irr[:, k]], repr(float(self.load_mult[k]))])
        return buf.getvalue()


def interpolate_hourly(series, dt_minutes: float) -> np.ndarray:
    """Resample hourly knots to ``dt_minutes`` steps, keeping both endpoints."""
    y = np.asarray(series, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ProfileError("series must be a nonempty 1-D sequence")
    if dt_minutes <= 0 or 60 % dt_minutes:
        raise ProfileError("dt must divide 60 minutes")
    step = int(dt_minutes)
    knots = np.arange(y.size) * 60
    query = np.arange(0, knots[-1] + 1, step)
    return np.interp(query, knots, y)


def load_profile(csv_text: str, dt_minutes: float | None = None) -> Profile:
    """Read a profile CSV; with ``dt_minutes`` the series are linearly resampled."""
    rows = [r for r in csv.reader(io.StringIO(csv_text)) if r]
    if len(rows) < 2:
        raise ProfileError("profile needs a header and at least one row")
    header = [h.strip() for h in rows[0]]
    if header[0] != "t_iso" or header[-1] != "load_mult" or len(header) < 3:
        raise ProfileError("header must be t_iso,irr_dg1,...,load_mult")
    width = len(header)
    times, values = [], []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != width:
            raise ProfileError(f"row {n}: expected {width} fields, got {len(r)}")
        try:
            times.append(datetime.fromisoformat(r[0].strip()))
            values.append([float(v) for v in r[1:]])
        except ValueError as exc:
            raise ProfileError(f"row {n}: {exc}") from exc
    minutes = np.array([(t - times[0]).total_seconds() / 60.0 for t in times])
    if np.any(np.diff(minutes) <= 0):
        raise ProfileError("timestamps must be strictly increasing")
    data = np.array(values, dtype=float)
    if dt_minutes is None:
        if len(minutes) > 1:
            steps = np.diff(minutes)
            if not np.allclose(steps, steps[0]):
                raise ProfileError("irregular timestamps; pass dt_minutes to resample")
            dt_minutes = float(steps[0])
        else:
            dt_minutes = 60.0
    else:
        query = np.arange(0.0, minutes[-1] + 1e-9, dt_minutes)
        data = np.column_stack([np.interp(query, minutes, data[:, j]) for j in range(data.shape[1])])
    return Profile(float(dt_minutes), data[:, :-1].T, data[:, -1], start=times[0].isoformat())


# Synthetic month ---------------------------------------------------------------

PEAK_IRR = 950.0
GAIN_RANGE = (1.0, 1.14)
LOAD_RANGE = (0.85, 1.5)
# hourly residential demand shape, p.u. of rated load
_LOAD_SHAPE = np.array([
    0.88, 0.86, 0.85, 0.85, 0.86, 0.90, 1.02, 1.18, 1.20, 1.10, 1.04, 1.02,
    1.03, 1.00, 0.98, 1.02, 1.15, 1.32, 1.45, 1.42, 1.30, 1.15, 1.02, 0.93,
])


def _daylight(hour: np.ndarray) -> np.ndarray:
    h = np.mod(hour, 24.0)
    return np.where((h > 6) & (h < 20), np.sin(np.pi * (h - 6) / 14.0), 0.0)


def synthesize_profile(days: int, dt_minutes: float = 5, seed: int = 0, n_dg: int = 3,
                       gain_tau_minutes: float = 15.0) -> Profile:
    """Deterministic synthetic irradiance/load month.

    Hourly knots are built from a half-sine daylight window scaled by a daily
    cloudiness factor, then linearly interpolated to ``dt_minutes``. Each DG's
    irradiance is the common trace times its own gain in [1, 1.14], a
    first-order filtered i.i.d. uniform process.
    """
    if days < 1:
        raise ProfileError("days must be at least 1")
    if dt_minutes <= 0 or 60 % dt_minutes:
        raise ProfileError("dt must divide 60 minutes")
    rng = np.random.default_rng(seed)
    n_hours = 24 * days
    hours = np.arange(n_hours + 1, dtype=float)

    cloud_day = 0.3 + 0.7 * rng.random(days + 1) ** 3
    cloud_hour = 0.85 + 0.15 * rng.random(n_hours + 1)
    irr_knots = PEAK_IRR * _daylight(hours) * cloud_day[(hours // 24).astype(int)] * cloud_hour

    day_scale = 1.0 + 0.04 * rng.standard_normal(days + 1)
    load_knots = _LOAD_SHAPE[(hours % 24).astype(int)] * day_scale[(hours // 24).astype(int)]
    load_knots *= 1.0 + 0.02 * rng.standard_normal(n_hours + 1)
    load_knots = np.clip(load_knots, *LOAD_RANGE)

    n = n_hours * 60 // int(dt_minutes)
    base = interpolate_hourly(irr_knots, dt_minutes)[:n]
    load = interpolate_hourly(load_knots, dt_minutes)[:n]

    lo, hi = GAIN_RANGE
    alpha = float(np.exp(-dt_minutes / gain_tau_minutes))
    draws = rng.uniform(lo, hi, size=(n_dg, n))
    gains = np.empty((n_dg, n))
    gains[:, 0] = draws[:, 0]
    for k in range(1, n):
        gains[:, k] = alpha * gains[:, k - 1] + (1.0 - alpha) * draws[:, k]
    return Profile(float(dt_minutes), base[None, :] * gains, load)
