"""Steady state of the droop-controlled islanded microgrid.

The unknowns are bus angles (reference DG bus fixed at zero), bus voltage
magnitudes, the common system frequency and per-DG inverter P and Q. The
equations are the bus power balances plus the P-f and Q-V droop laws of
every DG, so the frequency acts as a distributed slack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import Microgrid

F_N_RANGE = (0.9, 1.1)


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class VoltageCollapse(PowerFlowError):
    pass


class SharingError(ValueError):
    pass


@dataclass(frozen=True)
class LoadSnapshot:
    p: np.ndarray  # kW per bus, in bus order
    q: np.ndarray  # kvar per bus

    @classmethod
    def rated(cls, mg: Microgrid, load_mult: float = 1.0) -> "LoadSnapshot":
        if load_mult < 0:
            raise ValueError("load multiplier must be nonnegative")
        p = np.array([b.p_load_rated for b in mg.buses]) * load_mult
        q = np.array([b.q_load_rated for b in mg.buses]) * load_mult
        return cls(p, q)

    def add(self, mg: Microgrid, bus_id: int, dp: float, dq: float) -> "LoadSnapshot":
        k = mg.bus_index(bus_id)
        p, q = self.p.copy(), self.q.copy()
        p[k] += dp
        q[k] += dq
        return LoadSnapshot(p, q)


@dataclass(frozen=True)
class OperatingPoint:
    v: np.ndarray  # p.u. per bus
    theta: np.ndarray  # rad per bus
    f: float  # p.u.
    p_inv: np.ndarray  # kW per DG
    q_inv: np.ndarray  # kvar per DG
    p_loss: float  # kW
    residual: float = 0.0
    iterations: int = 0
    x: np.ndarray = field(default=None, repr=False)  # raw solver state, used for warm starts


def build_ybus(mg: Microgrid) -> np.ndarray:
    n = mg.n_bus
    y = np.zeros((n, n), dtype=complex)
    for ln in mg.lines:
        a, b = mg.bus_index(ln.from_bus), mg.bus_index(ln.to_bus)
        ys = 1.0 / mg.impedance_to_pu(complex(ln.r, ln.x))
        y[a, a] += ys
        y[b, b] += ys
        y[a, b] -= ys
        y[b, a] -= ys
    return y


class DroopSystem:
    """Residual and analytic Jacobian of the droop power-flow equations.

    State vector layout: ``[theta (non-reference buses), v (all buses), f,
    p_inv (DGs), q_inv (DGs)]``, everything in p.u.
    """

    def __init__(self, mg: Microgrid):
        self.mg = mg
        self.n = mg.n_bus
        self.m = mg.n_dg
        self.ybus = build_ybus(mg)
        self.dg_bus = np.array([mg.bus_index(d.bus) for d in mg.dgs])
        self.ref = int(self.dg_bus[0])
        self.pv_idx = np.array([k for k in range(self.n) if k != self.ref], dtype=int)
        self.m_p = np.array([mg.m_p_pu(d) for d in mg.dgs])
        self.n_q = np.array([mg.n_q_pu(d) for d in mg.dgs])
        self.v_n = np.array([d.droop.v_n for d in mg.dgs])
        # bus-by-DG incidence
        self.cg = np.zeros((self.n, self.m))
        self.cg[self.dg_bus, np.arange(self.m)] = 1.0
        n, m = self.n, self.m
        self.i_th = slice(0, n - 1)
        self.i_v = slice(n - 1, 2 * n - 1)
        self.i_f = 2 * n - 1
        self.i_p = slice(2 * n, 2 * n + m)
        self.i_q = slice(2 * n + m, 2 * n + 2 * m)
        self.size = 2 * n + 2 * m

    def flat_start(self, f_n: np.ndarray) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.i_v] = 1.0
        x[self.i_f] = float(np.mean(f_n))
        return x

    def unpack(self, x):
        theta = np.zeros(self.n)
        theta[self.pv_idx] = x[self.i_th]
        return theta, x[self.i_v], x[self.i_f], x[self.i_p], x[self.i_q]

    def injections(self, theta, v):
        vc = v * np.exp(1j * theta)
        current = self.ybus @ vc
        return vc, current, vc * np.conj(current)

    def residual(self, x, f_n, p_load_pu, q_load_pu) -> np.ndarray:
        theta, v, f, p_inv, q_inv = self.unpack(x)
        _, _, s = self.injections(theta, v)
        dp = self.cg @ p_inv - p_load_pu - s.real
        dq = self.cg @ q_inv - q_load_pu - s.imag
        droop_p = f - f_n + self.m_p * p_inv
        droop_q = v[self.dg_bus] - self.v_n + self.n_q * q_inv
        return np.concatenate([dp, dq, droop_p, droop_q])

    def jacobian(self, x) -> np.ndarray:
        theta, v, _, _, _ = self.unpack(x)
        vc, current, _ = self.injections(theta, v)
        n, m = self.n, self.m
        vnorm = vc / v
        ds_dvm = np.diag(vc) @ np.conj(self.ybus @ np.diag(vnorm)) + np.diag(np.conj(current) * vnorm)
        ds_dva = 1j * np.diag(vc) @ np.conj(np.diag(current) - self.ybus @ np.diag(vc))
        jac = np.zeros((self.size, self.size))
        # bus mismatch rows (residual = injection - S_calc)
        jac[:n, self.i_th] = -ds_dva.real[:, self.pv_idx]
        jac[:n, self.i_v] = -ds_dvm.real
        jac[:n, self.i_p] = self.cg
        jac[n:2 * n, self.i_th] = -ds_dva.imag[:, self.pv_idx]
        jac[n:2 * n, self.i_v] = -ds_dvm.imag
        jac[n:2 * n, self.i_q] = self.cg
        # droop rows
        rows_p = np.arange(2 * n, 2 * n + m)
        jac[rows_p, self.i_f] = 1.0
        jac[rows_p, 2 * n + np.arange(m)] = self.m_p
        rows_q = np.arange(2 * n + m, 2 * n + 2 * m)
        jac[rows_q, (n - 1) + self.dg_bus] = 1.0
        jac[rows_q, 2 * n + m + np.arange(m)] = self.n_q
        return jac

    def d_residual_d_fn(self) -> np.ndarray:
        d = np.zeros((self.size, self.m))
        d[2 * self.n + np.arange(self.m), np.arange(self.m)] = -1.0
        return d


_SYSTEMS: dict[int, tuple[Microgrid, DroopSystem]] = {}


def droop_system(mg: Microgrid) -> DroopSystem:
    """Cached :class:`DroopSystem` for ``mg`` (networks are immutable)."""
    hit = _SYSTEMS.get(id(mg))
    if hit is not None and hit[0] is mg:
        return hit[1]
    sys_ = DroopSystem(mg)
    if len(_SYSTEMS) > 32:
        _SYSTEMS.clear()
    _SYSTEMS[id(mg)] = (mg, sys_)
    return sys_


def solve_droop_pf(mg: Microgrid, f_n, loads: LoadSnapshot, *, tol: float = 1e-10,
                   max_iter: int = 30, x0: np.ndarray | None = None) -> OperatingPoint:
    """Newton solve of the droop power flow for nominal frequency setpoints ``f_n`` (p.u.)."""
    sys_ = droop_system(mg)
    f_n = np.asarray(f_n, dtype=float)
    if f_n.shape != (sys_.m,):
        raise ValueError(f"expected {sys_.m} setpoints, got shape {f_n.shape}")
    if np.any(f_n < F_N_RANGE[0]) or np.any(f_n > F_N_RANGE[1]):
        raise ValueError(f"setpoints {f_n} outside [{F_N_RANGE[0]}, {F_N_RANGE[1]}] p.u.")
    p_load = mg.power_to_pu(np.asarray(loads.p, dtype=float))
    q_load = mg.power_to_pu(np.asarray(loads.q, dtype=float))
    x = sys_.flat_start(f_n) if x0 is None else np.array(x0, dtype=float)
    r = sys_.residual(x, f_n, p_load, q_load)
    norm = np.max(np.abs(r))
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowError("droop power flow did not converge", norm)
        it += 1
        try:
            dx = np.linalg.solve(sys_.jacobian(x), -r)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular power-flow Jacobian", norm) from exc
        step = 1.0
        while True:
            x_new = x + step * dx
            r_new = sys_.residual(x_new, f_n, p_load, q_load)
            norm_new = np.max(np.abs(r_new))
            if norm_new < norm or step < 1e-4:
                break
            step *= 0.5
        x, r, norm = x_new, r_new, norm_new
        if np.any(x[sys_.i_v] < 0.5):
            raise VoltageCollapse("bus voltage fell below 0.5 p.u.", norm)
    theta, v, f, p_inv, q_inv = sys_.unpack(x)
    p_inv_kw = mg.power_from_pu(p_inv)
    p_loss = float(np.sum(p_inv_kw) - np.sum(loads.p))
    return OperatingPoint(v=v.copy(), theta=theta, f=float(f), p_inv=p_inv_kw,
                          q_inv=mg.power_from_pu(q_inv), p_loss=p_loss,
                          residual=float(norm), iterations=it, x=x)


@dataclass(frozen=True)
class Sensitivities:
    """First-order response of the solved state to the setpoints ``f_n``."""

    p_inv: np.ndarray  # kW per p.u. of f_n, (n_dg, n_dg)
    f: np.ndarray  # p.u. per p.u., (n_dg,)
    v: np.ndarray  # p.u. per p.u., (n_bus, n_dg)


def sensitivities(mg: Microgrid, op: OperatingPoint) -> Sensitivities:
    """Implicit-function derivatives at a converged point: dx/df_n = -J^-1 dR/df_n."""
    sys_ = droop_system(mg)
    dx = -np.linalg.solve(sys_.jacobian(op.x), sys_.d_residual_d_fn())
    return Sensitivities(p_inv=mg.power_from_pu(dx[sys_.i_p]), f=dx[sys_.i_f], v=dx[sys_.i_v])


def power_sharing_error(p_inv) -> tuple[np.ndarray, float]:
    """Per-DG deviation from the mean inverter power, in percent of the mean."""
    p = np.asarray(p_inv, dtype=float)
    if p.size == 0:
        raise SharingError("no DGs")
    avg = float(np.mean(p))
    if avg == 0:
        raise SharingError("zero average power")
    err = np.abs(p - avg) / abs(avg) * 100.0
    return err, float(np.max(err))
