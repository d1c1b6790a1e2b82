"""Per-timestep SoC-balancing optimal power flow over the droop setpoints.

The decision variables are the nominal frequency setpoints ``f_n`` of all
DGs inside a box (a load-dependent band or fixed bounds). The network is
evaluated with the nonlinear droop power flow; the optimizer is a sequential
LP on the implicit-function sensitivities of that power flow. Because the
objective is piecewise linear in battery power, each LP subproblem is exact
up to the (small) curvature of the network equations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .netmodel import BatteryPack, Microgrid
from .powerflow import (LoadSnapshot, OperatingPoint, power_sharing_error, sensitivities,
                        solve_droop_pf)
from .profiles import array_power

BAND_STEP = 0.001
BAND_TOP = 1.010
BAND_COUNT = 20
LOAD_STEP = 0.05


class SocFault(ValueError):
    """State of charge left the physical range [0, 100] %."""


class InfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class SocState:
    soc: np.ndarray  # %
    c_rating: np.ndarray  # Ah
    in_bounds: bool = True

    @classmethod
    def from_batteries(cls, batteries, soc=None) -> "SocState":
        c = np.array([b.c_rating for b in batteries], dtype=float)
        s = np.array([b.soc for b in batteries] if soc is None else soc, dtype=float)
        return cls(s, c, check_soc_bounds(s, batteries))

    @property
    def c_bat(self) -> np.ndarray:
        """Available charge in Ah."""
        return self.soc / 100.0 * self.c_rating


def check_soc_bounds(soc, batteries) -> bool:
    lo = np.array([b.soc_min for b in batteries])
    hi = np.array([b.soc_max for b in batteries])
    return bool(np.all(soc >= lo) and np.all(soc <= hi))


def soc_update(state: SocState, p_bat, dt: float, batteries: tuple[BatteryPack, ...]) -> SocState:
    """Integrate battery charge over ``dt`` hours; positive ``p_bat`` (kW) discharges."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p_bat = np.asarray(p_bat, dtype=float)
    v_bat = np.array([b.v_bat for b in batteries])
    c_rating = np.array([b.c_rating for b in batteries])
    current = p_bat * 1000.0 / v_bat  # A
    soc = (state.c_bat - current * dt) / c_rating * 100.0
    if np.any(soc < 0) or np.any(soc > 100) or not np.all(np.isfinite(soc)):
        raise SocFault(f"state of charge left [0, 100] %: {soc}")
    return SocState(soc, c_rating, check_soc_bounds(soc, batteries))


def soc_gain(batteries, dt: float) -> np.ndarray:
    """d(SoC %)/d(p_bat kW) over one step of ``dt`` hours (negative)."""
    v_bat = np.array([b.v_bat for b in batteries])
    c_rating = np.array([b.c_rating for b in batteries])
    return -1e5 * dt / (v_bat * c_rating)


def dsoc_matrix(soc) -> tuple[np.ndarray, float]:
    """Pairwise absolute SoC differences and their sum over all ordered pairs."""
    s = np.asarray(soc, dtype=float)
    if s.size < 2:
        raise ValueError("need at least two DGs")
    mat = np.abs(s[:, None] - s[None, :])
    return mat, float(mat.sum())


@dataclass(frozen=True)
class FnBand:
    lower: float
    upper: float

    @classmethod
    def fixed(cls, lower: float = 0.99, upper: float = 1.01) -> "FnBand":
        return cls(lower, upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower


def fn_band(load_pu: float, high_load_band: str = "top") -> FnBand:
    """Setpoint band selected by the normalized load level ``load_pu``.

    The load axis is cut into 20 bins of 0.05 p.u. counted down from 1.
    With ``high_load_band="top"`` the heaviest bin maps to [1.009, 1.010]
    and every lighter bin steps the band down by 0.001 p.u. With
    ``"bottom"`` the ordering is mirrored: the heaviest bin maps to
    [0.990, 0.991] and lighter loads step the band up, which makes the
    solved frequency fall as demand rises.
    """
    if not load_pu > 0:
        raise ValueError("load must be positive")
    k = math.floor(round((1.0 - load_pu) / LOAD_STEP, 9))
    k = min(max(k, 0), BAND_COUNT - 1)
    if high_load_band == "top":
        upper = round(BAND_TOP - BAND_STEP * k, 6)
    elif high_load_band == "bottom":
        upper = round(BAND_TOP - BAND_STEP * (BAND_COUNT - 1 - k), 6)
    else:
        raise ValueError("high_load_band must be 'top' or 'bottom'")
    return FnBand(round(upper - BAND_STEP, 6), upper)


@dataclass(frozen=True)
class OpfLimits:
    eps: float = 60.0  # max sharing error, %
    loss_frac: float = 0.1  # of rated load
    v_min: float = 0.95
    v_max: float = 1.0
    f_min: float = 0.99
    f_max: float = 1.01
    dsoc_max: float = 10.0  # %
    p_bat_max: float = 70.0  # kW


DEFAULT_LIMITS = OpfLimits()


@dataclass(frozen=True)
class OpfStepInput:
    mg: Microgrid
    soc_state: SocState
    irr: np.ndarray  # W/m^2 per DG
    load_mult: float
    dt: float  # hours
    loads: LoadSnapshot | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "irr", np.asarray(self.irr, dtype=float))

    def load_snapshot(self) -> LoadSnapshot:
        return self.loads if self.loads is not None else LoadSnapshot.rated(self.mg, self.load_mult)

    def p_pv(self) -> np.ndarray:
        return np.array([array_power(g, d.pv) for g, d in zip(self.irr, self.mg.dgs)])


@dataclass(frozen=True)
class OpfStepResult:
    f_n: np.ndarray
    op: OperatingPoint
    p_pv: np.ndarray
    p_bat: np.ndarray
    soc_next: SocState
    dsoc_sum: float
    err_max: float
    p_loss: float
    feasible: bool
    violations: dict = field(default_factory=dict)
    iterations: int = 0


def constraint_violations(inp: OpfStepInput, op: OperatingPoint, f_n, band: FnBand,
                          soc_next: np.ndarray, limits: OpfLimits = DEFAULT_LIMITS) -> dict[str, float]:
    """Amount by which each constraint is exceeded (0 when satisfied)."""
    mg = inp.mg
    p_pv = inp.p_pv()
    p_bat = op.p_inv - p_pv
    avg = float(np.mean(op.p_inv))
    if avg > 0:
        err = np.abs(op.p_inv - avg) / avg * 100.0
        err_v = float(np.max(np.maximum(err - limits.eps, 0.0)))
    else:
        err_v = float("inf")
    lo = np.array([d.battery.soc_min for d in mg.dgs])
    hi = np.array([d.battery.soc_max for d in mg.dgs])
    pmax = np.array([d.p_inv_max for d in mg.dgs])
    dmat, _ = dsoc_matrix(soc_next)
    f_n = np.asarray(f_n)
    return {
        "band": float(max(np.max(band.lower - f_n), np.max(f_n - band.upper), 0.0)),
        "sharing": err_v,
        "loss": max(op.p_loss - limits.loss_frac * mg.rated_load_total, 0.0),
        "voltage": float(max(np.max(limits.v_min - op.v), np.max(op.v - limits.v_max), 0.0)),
        "frequency": max(limits.f_min - op.f, op.f - limits.f_max, 0.0),
        "soc": float(max(np.max(lo - soc_next), np.max(soc_next - hi), 0.0)),
        "dsoc": float(max(np.max(dmat) - limits.dsoc_max, 0.0)),
        "p_bat": float(max(np.max(np.abs(p_bat)) - limits.p_bat_max, 0.0)),
        "p_inv": float(max(np.max(op.p_inv - pmax), 0.0)),
    }


# tolerances used to accept a constraint as satisfied, per constraint unit
_FEAS_TOL = {"band": 1e-12, "sharing": 1e-6, "loss": 1e-6, "voltage": 1e-9, "frequency": 1e-9,
             "soc": 1e-7, "dsoc": 1e-7, "p_bat": 1e-6, "p_inv": 1e-6}


def is_feasible(violations: dict[str, float]) -> bool:
    return all(v <= _FEAS_TOL[k] for k, v in violations.items())


def evaluate_setpoints(inp: OpfStepInput, f_n, band: FnBand, limits: OpfLimits = DEFAULT_LIMITS,
                       x0=None, iterations: int = 0) -> OpfStepResult:
    """Solve the power flow at ``f_n`` and score it against the OPF objective and constraints."""
    f_n = np.array(f_n, dtype=float)
    op = solve_droop_pf(inp.mg, f_n, inp.load_snapshot(), x0=x0)
    p_pv = inp.p_pv()
    p_bat = op.p_inv - p_pv
    batteries = tuple(d.battery for d in inp.mg.dgs)
    soc_next = soc_update(inp.soc_state, p_bat, inp.dt, batteries)
    viol = constraint_violations(inp, op, f_n, band, soc_next.soc, limits)
    _, dsum = dsoc_matrix(soc_next.soc)
    try:
        _, err_max = power_sharing_error(op.p_inv)
    except ValueError:
        err_max = float("inf")
    return OpfStepResult(f_n=f_n, op=op, p_pv=p_pv, p_bat=p_bat, soc_next=soc_next, dsoc_sum=dsum,
                         err_max=err_max, p_loss=op.p_loss, feasible=is_feasible(viol),
                         violations=viol, iterations=iterations)


# weights of the LP merit: objective in %SoC, tie-break per band width, penalty per violation unit
_TIE_WEIGHT = 1e-4
_PENALTY = 1e3
_PU_SCALE = 1e3  # frequency/voltage rows expressed in milli-p.u.


def _merit(res: OpfStepResult, band: FnBand) -> float:
    v = res.violations
    pen = (v["sharing"] + v["loss"] + v["p_bat"] + v["p_inv"] + v["soc"] + v["dsoc"]
           + _PU_SCALE * (v["voltage"] + v["frequency"]))
    tie = _TIE_WEIGHT * float(np.sum(res.f_n - band.lower)) / BAND_STEP
    return res.dsoc_sum + _PENALTY * pen + tie


def _lp_step(inp: OpfStepInput, res: OpfStepResult, band: FnBand, limits: OpfLimits,
             radius: float) -> np.ndarray:
    """One linearized subproblem; returns the setpoint update in p.u."""
    mg = inp.mg
    n = mg.n_dg
    op = res.op
    sens = sensitivities(mg, op)
    ds = BAND_STEP
    pu = sens.p_inv * ds  # kW per unit step
    gain = soc_gain([d.battery for d in mg.dgs], inp.dt)
    g = gain[:, None] * pu  # %SoC per unit step
    sn0 = res.soc_next.soc
    pairs = list(itertools.combinations(range(n), 2))
    n_t = len(pairs)

    rows, rhs, soft = [], [], []

    def add(a_u, b, a_t=None, is_soft=True):
        row = np.zeros(n + n_t)
        row[:n] = a_u
        if a_t is not None:
            row[n:] = a_t
        rows.append(row)
        rhs.append(b)
        soft.append(is_soft)

    for k, (i, j) in enumerate(pairs):
        e_t = np.zeros(n_t)
        e_t[k] = -1.0
        diff0 = sn0[i] - sn0[j]
        add(g[i] - g[j], -diff0, e_t, False)
        add(-(g[i] - g[j]), diff0, e_t, False)
        add(g[i] - g[j], limits.dsoc_max - diff0)
        add(-(g[i] - g[j]), limits.dsoc_max + diff0)
    sf = sens.f * ds * _PU_SCALE
    add(sf, (limits.f_max - op.f) * _PU_SCALE)
    add(-sf, (op.f - limits.f_min) * _PU_SCALE)
    sv = sens.v * ds * _PU_SCALE
    for b in range(mg.n_bus):
        add(sv[b], (limits.v_max - op.v[b]) * _PU_SCALE)
        add(-sv[b], (op.v[b] - limits.v_min) * _PU_SCALE)
    p0 = op.p_inv
    avg0 = float(np.mean(p0))
    mean_pu = pu.mean(axis=0)
    e = limits.eps / 100.0
    for i in range(n):
        add(pu[i] - (1 + e) * mean_pu, (1 + e) * avg0 - p0[i])
        add((1 - e) * mean_pu - pu[i], p0[i] - (1 - e) * avg0)
        pb0 = p0[i] - res.p_pv[i]
        add(pu[i], limits.p_bat_max - pb0)
        add(-pu[i], limits.p_bat_max + pb0)
        add(pu[i], mg.dgs[i].p_inv_max - p0[i])
        add(g[i], mg.dgs[i].battery.soc_max - sn0[i])
        add(-g[i], sn0[i] - mg.dgs[i].battery.soc_min)
    add(pu.sum(axis=0), limits.loss_frac * mg.rated_load_total - op.p_loss)

    a = np.array(rows)
    soft = np.array(soft)
    n_s = int(soft.sum())
    slack = np.zeros((len(rows), n_s))
    slack[np.flatnonzero(soft), np.arange(n_s)] = -1.0
    a_ub = np.hstack([a, slack])
    c = np.concatenate([np.full(n, _TIE_WEIGHT), np.full(n_t, 2.0), np.full(n_s, _PENALTY)])
    lo_u = np.maximum((band.lower - res.f_n) / ds, -radius)
    hi_u = np.minimum((band.upper - res.f_n) / ds, radius)
    bounds = [(float(l), float(h)) for l, h in zip(lo_u, hi_u)] + [(0, None)] * (n_t + n_s)
    sol = linprog(c, A_ub=a_ub, b_ub=np.array(rhs), bounds=bounds, method="highs")
    if sol.status != 0:
        return np.zeros(n)
    return sol.x[:n] * ds


def solve_step(inp: OpfStepInput, band: FnBand, limits: OpfLimits = DEFAULT_LIMITS, *,
               f_n0=None, x0=None, max_iter: int = 12, step_tol: float = 1e-11) -> OpfStepResult:
    """Minimize the summed pairwise SoC difference after the step over ``f_n`` in ``band``.

    Among setpoints with equal objective the lowest ones are preferred
    (a small tie-break weight on the sum of setpoints). Returns the best point
    found; ``feasible`` is False when some constraint could not be met.
    """
    n = inp.mg.n_dg
    if f_n0 is None:
        f_n0 = np.full(n, 0.5 * (band.lower + band.upper))
    f_n = np.clip(np.asarray(f_n0, dtype=float), band.lower, band.upper)
    res = evaluate_setpoints(inp, f_n, band, limits, x0=x0)
    merit = _merit(res, band)
    radius = band.width / BAND_STEP
    it = 0
    for it in range(1, max_iter + 1):
        d = _lp_step(inp, res, band, limits, radius)
        if np.max(np.abs(d)) < step_tol:
            break
        trial_fn = np.clip(res.f_n + d, band.lower, band.upper)
        trial = evaluate_setpoints(inp, trial_fn, band, limits, x0=res.op.x, iterations=it)
        trial_merit = _merit(trial, band)
        if trial_merit <= merit + 1e-12:
            res, merit = trial, trial_merit
        else:
            radius = 0.25 * float(np.max(np.abs(d))) / BAND_STEP
            if radius * BAND_STEP < step_tol:
                break
    return OpfStepResult(**{**res.__dict__, "iterations": it})


def brute_force_step(inp: OpfStepInput, band: FnBand, resolution: float = 1e-4,
                     limits: OpfLimits = DEFAULT_LIMITS, box=None) -> OpfStepResult:
    """Exhaustive grid over the setpoint box; the minimum-objective feasible point wins.

    ``box`` optionally replaces the band by per-DG (lower, upper) limits, e.g.
    to enumerate a finer grid over a narrower window.
    """
    n = inp.mg.n_dg
    if box is None:
        box = [(band.lower, band.upper)] * n
    elif any(lo < band.lower - 1e-12 or hi > band.upper + 1e-12 for lo, hi in box):
        raise ValueError("search box must lie inside the band")
    axes = []
    for lo, hi in box:
        k = int(round((hi - lo) / resolution))
        axes.append(lo + resolution * np.arange(k + 1))
    if math.prod(len(a) for a in axes) > 2_000_000:
        raise ValueError("grid too large for exhaustive search")
    best, best_key = None, None
    x0 = None
    for point in itertools.product(*axes):
        res = evaluate_setpoints(inp, np.array(point), band, limits, x0=x0)
        x0 = res.op.x
        if not res.feasible:
            continue
        key = (res.dsoc_sum, float(np.sum(res.f_n)))
        if best_key is None or key < best_key:
            best, best_key = res, key
    if best is None:
        raise InfeasibleError("no feasible grid point")
    return best
