"""Two-layer tanh network trained with Levenberg-Marquardt."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MODEL_FORMAT = "nnems-model"
MODEL_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MinMax:
    """Per-feature affine map of [lo, hi] onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ModelError("normalization bounds differ in shape")
        if not np.all(hi > lo):
            raise ModelError("degenerate normalization range (max <= min)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def fit(cls, data: np.ndarray) -> "MinMax":
        return cls(np.min(data, axis=0), np.max(data, axis=0))

    def norm(self, x):
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0

    def denorm(self, z):
        return (z + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


@dataclass(frozen=True)
class NnModel:
    w_h: np.ndarray  # (n_hidden, n_in)
    b_h: np.ndarray  # (n_hidden,)
    w_o: np.ndarray  # (n_out, n_hidden)
    b_o: np.ndarray  # (n_out,)
    in_norm: MinMax
    out_norm: MinMax

    def __post_init__(self):
        h, n_in = np.shape(self.w_h)
        n_out = np.shape(self.w_o)[0]
        if (np.shape(self.b_h) != (h,) or np.shape(self.w_o) != (n_out, h) or np.shape(self.b_o) != (n_out,)
                or self.in_norm.lo.shape != (n_in,) or self.out_norm.lo.shape != (n_out,)):
            raise ModelError("inconsistent layer shapes")

    @property
    def n_in(self) -> int:
        return self.w_h.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def n_out(self) -> int:
        return self.w_o.shape[0]

    def params(self) -> np.ndarray:
        return np.concatenate([self.w_h.ravel(), self.b_h, self.w_o.ravel(), self.b_o])

    def with_params(self, theta: np.ndarray) -> "NnModel":
        h, n_in, n_out = self.n_hidden, self.n_in, self.n_out
        i = 0
        w_h = theta[i:i + h * n_in].reshape(h, n_in)
        i += h * n_in
        b_h = theta[i:i + h]
        i += h
        w_o = theta[i:i + n_out * h].reshape(n_out, h)
        i += n_out * h
        b_o = theta[i:i + n_out]
        return NnModel(w_h.copy(), b_h.copy(), w_o.copy(), b_o.copy(), self.in_norm, self.out_norm)


def _forward_norm(model: NnModel, z: np.ndarray):
    a = np.tanh(z @ model.w_h.T + model.b_h)
    return a @ model.w_o.T + model.b_o, a


def forward(model: NnModel, x) -> np.ndarray:
    """Raw-unit prediction for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_in or x.ndim > 2:
        raise ModelError(f"expected {model.n_in} inputs, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite input")
    y, _ = _forward_norm(model, model.in_norm.norm(x))
    return model.out_norm.denorm(y)


def residual_jacobian(model: NnModel, z: np.ndarray, t: np.ndarray):
    """Residuals e = t - y (normalized, sample-major) and J = de/dtheta."""
    y, a = _forward_norm(model, z)
    e = (t - y).ravel()
    n, h = a.shape
    n_in, n_out = model.n_in, model.n_out
    da = 1.0 - a * a  # (n, h)
    jac = np.empty((n, n_out, model.params().size))
    # d y_k / d w_h[j, i] = w_o[k, j] * da[:, j] * z[:, i]
    g = model.w_o[None, :, :] * da[:, None, :]  # (n, n_out, h)
    jac[:, :, :h * n_in] = (g[:, :, :, None] * z[:, None, None, :]).reshape(n, n_out, h * n_in)
    jac[:, :, h * n_in:h * n_in + h] = g
    off = h * n_in + h
    blk = np.zeros((n, n_out, n_out * h))
    for k in range(n_out):
        blk[:, k, k * h:(k + 1) * h] = a
    jac[:, :, off:off + n_out * h] = blk
    jac[:, :, off + n_out * h:] = np.eye(n_out)[None, :, :]
    return e, -jac.reshape(n * n_out, -1)


def init_model(n_in: int, n_hidden: int, n_out: int, in_norm: MinMax, out_norm: MinMax,
               rng: np.random.Generator) -> NnModel:
    """Nguyen-Widrow style initialization for inputs already scaled to [-1, 1]."""
    beta = 0.7 * n_hidden ** (1.0 / n_in)
    w = rng.uniform(-1.0, 1.0, size=(n_hidden, n_in))
    w *= beta / np.linalg.norm(w, axis=1, keepdims=True)
    b = beta * np.linspace(-1.0, 1.0, n_hidden) * np.sign(w[:, 0]) if n_hidden > 1 else np.zeros(1)
    w_o = rng.uniform(-0.5, 0.5, size=(n_out, n_hidden))
    b_o = rng.uniform(-0.5, 0.5, size=n_out)
    return NnModel(w, b, w_o, b_o, in_norm, out_norm)


@dataclass
class TrainReport:
    mse: dict[str, float]
    r: dict[str, list[float]]
    epochs: int
    stop_reason: str
    history: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"mse": self.mse, "r": self.r, "epochs": self.epochs, "stop_reason": self.stop_reason}


def regression_r(pred, target) -> np.ndarray:
    """Pearson correlation between predictions and targets, per output column."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    if p.shape != t.shape:
        raise ValueError("prediction and target shapes differ")
    if p.shape[0] < 2:
        raise ValueError("need at least two samples")
    tc = t - t.mean(axis=0)
    pc = p - p.mean(axis=0)
    st = np.sqrt(np.sum(tc * tc, axis=0))
    if np.any(st == 0):
        raise ValueError("zero target variance")
    sp = np.sqrt(np.sum(pc * pc, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sum(tc * pc, axis=0) / (st * sp)
    return np.clip(np.nan_to_num(r), -1.0, 1.0)


def _mse(model: NnModel, z, t) -> float:
    y, _ = _forward_norm(model, z)
    return float(np.mean((t - y) ** 2))


def train_lm(train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None = None,
             n_hidden: int = 10, seed: int = 0, *, max_epochs: int = 1000, patience: int = 6,
             mu0: float = 1e-3, mu_dec: float = 0.1, mu_inc: float = 10.0, mu_max: float = 1e10,
             mu_min: float = 1e-10, min_grad: float = 1e-7, goal: float = 0.0,
             test: tuple[np.ndarray, np.ndarray] | None = None,
             norm_data: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[NnModel, TrainReport]:
    """Levenberg-Marquardt fit of a tanh network on (inputs, targets) in raw units.

    Normalization ranges come from ``norm_data`` when given, else from the
    training split. The returned model is the one with the lowest validation
    MSE seen at an accepted epoch (the last accepted one without ``val``).
    """
    x, y = (np.asarray(a, dtype=float) for a in train)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise TrainingError("training split is empty or misaligned")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise TrainingError("non-finite training data")
    if norm_data is None:
        nx, ny = x, y
    else:
        nx = np.asarray(norm_data[0], dtype=float).reshape(-1, x.shape[1])
        ny = np.asarray(norm_data[1], dtype=float).reshape(-1, y.shape[1])
    try:
        in_norm, out_norm = MinMax.fit(nx), MinMax.fit(ny)
    except ModelError as exc:
        raise TrainingError(str(exc)) from exc
    rng = np.random.default_rng(seed)
    model = init_model(x.shape[1], n_hidden, y.shape[1], in_norm, out_norm, rng)
    zt, tt = in_norm.norm(x), out_norm.norm(y)
    if val is not None:
        zv = in_norm.norm(np.asarray(val[0], dtype=float).reshape(-1, x.shape[1]))
        tv = out_norm.norm(np.asarray(val[1], dtype=float).reshape(-1, y.shape[1]))
    mu = mu0
    theta = model.params()
    e, jac = residual_jacobian(model, zt, tt)
    sse = float(e @ e)
    best, best_val = model, _mse(model, zv, tv) if val is not None else float("inf")
    fails, epoch, reason = 0, 0, "max_epochs"
    history = []
    eye = np.eye(theta.size)
    while epoch < max_epochs:
        grad = jac.T @ e
        if sse / e.size <= goal:
            reason = "goal"
            break
        if np.max(np.abs(grad)) < min_grad:
            reason = "min_grad"
            break
        jtj = jac.T @ jac
        accepted = False
        while mu <= mu_max:
            try:
                step = np.linalg.solve(jtj + mu * eye, -grad)
            except np.linalg.LinAlgError:
                mu *= mu_inc
                continue
            cand = model.with_params(theta + step)
            e_new, _ = _residuals(cand, zt, tt)
            sse_new = float(e_new @ e_new)
            if sse_new < sse:
                accepted = True
                break
            mu *= mu_inc
        if not accepted:
            reason = "mu_max"
            break
        epoch += 1
        mu = max(mu * mu_dec, mu_min)
        model, theta = cand, cand.params()
        e, jac = residual_jacobian(model, zt, tt)
        sse = float(e @ e)
        rec = {"epoch": epoch, "train_mse": sse / e.size, "mu": mu}
        if val is not None:
            v = _mse(model, zv, tv)
            rec["val_mse"] = v
            if v < best_val:
                best, best_val, fails = model, v, 0
            else:
                fails += 1
                if fails >= patience:
                    history.append(rec)
                    reason = "validation"
                    break
        else:
            best = model
        history.append(rec)
    if val is None:
        best = model
    report = _report(best, {"train": (x, y), "val": val, "test": test}, epoch, reason)
    report.history = history
    return best, report


def _residuals(model: NnModel, z, t):
    y, a = _forward_norm(model, z)
    return (t - y).ravel(), a


def _report(model: NnModel, splits: dict, epochs: int, reason: str) -> TrainReport:
    mse, r = {}, {}
    for name, split in splits.items():
        if split is None or len(split[0]) == 0:
            continue
        x = np.asarray(split[0], dtype=float).reshape(-1, model.n_in)
        y = np.asarray(split[1], dtype=float).reshape(-1, model.n_out)
        mse[name] = _mse(model, model.in_norm.norm(x), model.out_norm.norm(y))
        try:
            r[name] = regression_r(forward(model, x), y).tolist()
        except ValueError:
            r[name] = [float("nan")] * model.n_out
    return TrainReport(mse, r, epochs, reason)


def evaluate(model: NnModel, x, y) -> tuple[float, np.ndarray]:
    """Normalized MSE and per-output R on raw-unit data."""
    x = np.asarray(x, dtype=float).reshape(-1, model.n_in)
    y = np.asarray(y, dtype=float).reshape(-1, model.n_out)
    return _mse(model, model.in_norm.norm(x), model.out_norm.norm(y)), regression_r(forward(model, x), y)


def decentralized_columns(n_dg: int, dg_index: int) -> tuple[list[int], int]:
    """Input columns (p_pv_i, f) and output column f_n_i for one DG."""
    if not 0 <= dg_index < n_dg:
        raise ValueError(f"DG index {dg_index} out of range")
    return [dg_index, n_dg], dg_index


def train_decentralized(train, val, dg_index: int, n_hidden: int = 10, seed: int = 0,
                        **kwargs) -> tuple[NnModel, TrainReport]:
    """Local 2-input model for one DG, trained from the full centralized splits."""
    x, y = (np.asarray(a, dtype=float) for a in train)
    cols, out = decentralized_columns(y.shape[1], dg_index)

    def pick(split):
        if split is None:
            return None
        return np.asarray(split[0], dtype=float)[:, cols], np.asarray(split[1], dtype=float)[:, out]

    test = kwargs.pop("test", None)
    norm_data = kwargs.pop("norm_data", None)
    return train_lm(pick((x, y)), pick(val), n_hidden, seed, test=pick(test),
                    norm_data=pick(norm_data), **kwargs)


# Model files ---------------------------------------------------------------------

def model_to_dict(model: NnModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_in": model.n_in,
        "n_hidden": model.n_hidden,
        "n_out": model.n_out,
        "w_h": model.w_h.ravel().tolist(),
        "b_h": model.b_h.tolist(),
        "w_o": model.w_o.ravel().tolist(),
        "b_o": model.b_o.tolist(),
        "in_min": model.in_norm.lo.tolist(),
        "in_max": model.in_norm.hi.tolist(),
        "out_min": model.out_norm.lo.tolist(),
        "out_max": model.out_norm.hi.tolist(),
    }


def save_model(model: NnModel) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def load_model(text: str) -> NnModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"corrupt model file: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ModelError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelError(f"unsupported model version {d.get('version')!r}")
    try:
        n_in, h, n_out = int(d["n_in"]), int(d["n_hidden"]), int(d["n_out"])
        return NnModel(
            np.array(d["w_h"], dtype=float).reshape(h, n_in),
            np.array(d["b_h"], dtype=float),
            np.array(d["w_o"], dtype=float).reshape(n_out, h),
            np.array(d["b_o"], dtype=float),
            MinMax(d["in_min"], d["in_max"]),
            MinMax(d["out_min"], d["out_max"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"corrupt model file: {exc}") from exc
