"""ARIMA(p,d,q) fitting and forecasting for scalar training trajectories.

Estimation is deliberately lightweight: ordinary least squares for pure
AR models, conditional-sum-of-squares Gauss-Newton (warm-started from
the AR fit) when moving-average terms are present. No exact likelihood,
no Kalman filter. With p = q = 0 the model has no estimable parameters
and the intercept is pinned to zero, i.e. d = 1 is a driftless random
walk whose forecast is flat at the last observation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateFitError
from .optim import Sgd
from .tensor import Tensor


@dataclass
class ActivationTrace:
    probe_id: str
    values: list[float] = field(default_factory=list)

    def append(self, value: float) -> None:
        self.values.append(float(value))

    def __len__(self):
        return len(self.values)


@dataclass
class ArimaModel:
    p: int
    d: int
    q: int
    ar: np.ndarray        # phi[1..p]
    ma: np.ndarray        # theta[1..q]
    intercept: float
    sigma2: float
    stationary: bool
    residuals: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# differencing


def difference(series, d: int) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    if d < 0:
        raise ContractError(f"d must be >= 0, got {d}")
    if len(series) <= d:
        raise ContractError(f"series of length {len(series)} cannot be differenced {d} times")
    out = series
    for _ in range(d):
        out = np.diff(out)
    return out


def initial_values(series, d: int) -> list[float]:
    """First element of each differencing level, for exact reconstruction."""
    series = np.asarray(series, dtype=np.float64)
    out = []
    for _ in range(d):
        out.append(float(series[0]))
        series = np.diff(series)
    return out


def undifference(diffed, initials: list[float]) -> np.ndarray:
    out = np.asarray(diffed, dtype=np.float64)
    for init in reversed(initials):
        out = np.concatenate([[init], out]).cumsum()
    return out


# ---------------------------------------------------------------------------
# fitting


def _css_residuals(w: np.ndarray, phi: np.ndarray, theta: np.ndarray, c: float) -> np.ndarray:
    """Conditional residuals e[t] for t in [p, n); earlier residuals are 0."""
    p, q = len(phi), len(theta)
    n = len(w)
    e = np.zeros(n)
    for t in range(p, n):
        acc = w[t] - c
        for i in range(p):
            acc -= phi[i] * w[t - 1 - i]
        for j in range(q):
            if t - 1 - j >= p:
                acc -= theta[j] * e[t - 1 - j]
        e[t] = acc
    return e


def _css_jacobian(w: np.ndarray, phi: np.ndarray, theta: np.ndarray, c: float,
                  e: np.ndarray) -> np.ndarray:
    """d e[t] / d (c, phi, theta), rows t in [p, n)."""
    p, q = len(phi), len(theta)
    n = len(w)
    npar = 1 + p + q
    de = np.zeros((n, npar))
    for t in range(p, n):
        de[t, 0] = -1.0
        for i in range(p):
            de[t, 1 + i] = -w[t - 1 - i]
        for j in range(q):
            if t - 1 - j >= p:
                de[t, 1 + p + j] = -e[t - 1 - j]
        for j in range(q):
            if t - 1 - j >= p:
                de[t] -= theta[j] * de[t - 1 - j]
    return de[p:]


def _ar_ols(w: np.ndarray, p: int) -> tuple[float, np.ndarray, np.ndarray]:
    """OLS fit of w[t] = c + phi . w[t-1..t-p] + e; returns (c, phi, residuals)."""
    n = len(w)
    if p == 0:
        c = float(w.mean())
        return c, np.zeros(0), w - c
    rows = n - p
    x = np.ones((rows, p + 1))
    for i in range(p):
        x[:, 1 + i] = w[p - 1 - i:n - 1 - i]
    y = w[p:]
    coeffs, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < p + 1:
        raise DegenerateFitError(
            f"singular regressor matrix for AR({p}) fit (constant or near-constant series)")
    residuals = y - x @ coeffs
    return float(coeffs[0]), coeffs[1:].copy(), residuals


def fit_arima(series, p: int, d: int, q: int) -> ArimaModel:
    """Fit ARIMA(p,d,q) by differencing + OLS (q=0) or CSS Gauss-Newton."""
    series = np.asarray(series, dtype=np.float64)
    if min(p, d, q) < 0:
        raise ContractError(f"orders must be nonnegative, got ({p},{d},{q})")
    if len(series) < p + d + q + 10:
        raise ContractError(
            f"series of length {len(series)} is too short for ARIMA({p},{d},{q}); need {p + d + q + 10}")
    w = difference(series, d)

    if p == 0 and q == 0:
        residuals = w.copy()
        sigma2 = float((residuals ** 2).mean()) if len(residuals) else 0.0
        return ArimaModel(p, d, q, np.zeros(0), np.zeros(0), 0.0, sigma2, True, residuals)

    if q == 0:
        c, phi, residuals = _ar_ols(w, p)
        theta = np.zeros(0)
    else:
        c, phi, _ = _ar_ols(w, p) if p else (float(w.mean()), np.zeros(0), None)
        theta = np.zeros(q)
        c, phi, theta = _gauss_newton_css(w, c, phi, theta)
        residuals = _css_residuals(w, phi, theta, c)[p:]
    sigma2 = float((residuals ** 2).mean())
    stationary = _is_stationary(phi)
    if not stationary:
        warnings.warn(f"fitted AR polynomial is not stationary (phi={phi})", stacklevel=2)
    return ArimaModel(p, d, q, np.asarray(phi), np.asarray(theta), float(c), sigma2,
                      stationary, residuals)


def _gauss_newton_css(w: np.ndarray, c: float, phi: np.ndarray, theta: np.ndarray,
                      max_iter: int = 100, tol: float = 1e-12):
    p, q = len(phi), len(theta)
    params = np.concatenate([[c], phi, theta])

    def unpack(v):
        return float(v[0]), v[1:1 + p], v[1 + p:]

    def ssr_of(v):
        c_, phi_, theta_ = unpack(v)
        e = _css_residuals(w, phi_, theta_, c_)
        return float((e[p:] ** 2).sum()), e

    ssr, e = ssr_of(params)
    for _ in range(max_iter):
        c_, phi_, theta_ = unpack(params)
        jac = _css_jacobian(w, phi_, theta_, c_, e)
        rhs = e[p:]
        try:
            step, *_ = np.linalg.lstsq(jac, -rhs, rcond=None)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFitError(f"Gauss-Newton step failed: {exc}") from exc
        # damped update: halve until the residual sum improves
        scale = 1.0
        for _halving in range(30):
            trial = params + scale * step
            trial_ssr, trial_e = ssr_of(trial)
            if trial_ssr <= ssr:
                break
            scale *= 0.5
        else:
            break
        moved = np.abs(scale * step).max()
        params, prev_ssr, ssr, e = trial, ssr, trial_ssr, trial_e
        if moved < tol * (1.0 + np.abs(params).max()) or prev_ssr - ssr < tol * max(ssr, 1e-300):
            break
    return unpack(params)


def _is_stationary(phi: np.ndarray) -> bool:
    if len(phi) == 0:
        return True
    poly = np.concatenate([[-c for c in phi[::-1]], [1.0]])  # -phi_p z^p ... + 1
    roots = np.roots(poly)
    return bool(np.all(np.abs(roots) > 1.0 + 1e-9)) if len(roots) else True


# ---------------------------------------------------------------------------
# forecasting


def forecast(model: ArimaModel, history, horizon: int) -> np.ndarray:
    """Iterate the fitted recursion with future innovations set to zero,
    then invert the differencing back to the original scale."""
    if horizon < 0:
        raise ContractError(f"horizon must be >= 0, got {horizon}")
    if horizon == 0:
        return np.zeros(0)
    history = np.asarray(history, dtype=np.float64)
    if len(history) < model.p + model.d:
        raise ContractError(f"history of length {len(history)} is too short for ({model.p},{model.d})")
    w = difference(history, model.d)
    e = _css_residuals(w, model.ar, model.ma, model.intercept)
    wbuf = list(w)
    ebuf = list(e)
    out = []
    for _ in range(horizon):
        t = len(wbuf)
        val = model.intercept
        for i in range(model.p):
            val += model.ar[i] * wbuf[t - 1 - i]
        for j in range(model.q):
            val += model.ma[j] * ebuf[t - 1 - j]  # zero for future steps
        wbuf.append(val)
        ebuf.append(0.0)
        out.append(val)
    # rebuild the original scale from the tail of each differencing level
    levels = []
    s = history
    for _ in range(model.d):
        levels.append(s[-1])
        s = np.diff(s)
    pred = np.asarray(out)
    for last in reversed(levels):
        pred = last + np.cumsum(pred)
    return pred


# ---------------------------------------------------------------------------
# the trajectory probe: a 2-layer net regressing y = x^2


class QuadraticProbe:
    """Tiny fully connected regressor whose hidden unit we watch per epoch."""

    def __init__(self, seed: int, hidden: int = 16, lr: float = 0.05, n_points: int = 128):
        self.hidden = hidden
        master = np.random.SeedSequence(seed)
        init_ss, data_ss = master.spawn(2)
        rng = np.random.default_rng(init_ss)
        dtype = T.get_default_dtype()
        lim1 = np.sqrt(1.0 / 1)
        lim2 = np.sqrt(1.0 / hidden)
        self.params = {
            "fc1.w": Tensor((rng.uniform(-lim1, lim1, (1, hidden))).astype(dtype), requires_grad=True),
            "fc1.b": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            "fc2.w": Tensor((rng.uniform(-lim2, lim2, (hidden, 1))).astype(dtype), requires_grad=True),
            "fc2.b": Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        }
        data_rng = np.random.default_rng(data_ss)
        x = data_rng.uniform(-1.0, 1.0, (n_points, 1))
        self.x = Tensor(x.astype(dtype))
        self.y = Tensor((x ** 2).astype(dtype))
        # lr == 0 freezes the probe (useful for degenerate-trace tests)
        self.opt = Sgd(self.params, lr=lr, momentum=0.9) if lr > 0 else None

    def _hidden(self, x: Tensor) -> Tensor:
        return T.tanh(T.linear(x, self.params["fc1.w"], self.params["fc1.b"]))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(self._hidden(x), self.params["fc2.w"], self.params["fc2.b"])

    def train_epoch(self, epoch: int) -> float:
        with T.scoped_graph():
            pred = self.forward(self.x)
            loss = T.mean_all(T.square(T.sub(pred, self.y)))
            if self.opt is not None:
                T.backward(loss)
                self.opt.step(epoch)
            return loss.item()

    def hidden_activation(self, probe_x: float, unit_index: int) -> float:
        if not 0 <= unit_index < self.hidden:
            raise IndexError(f"unit index {unit_index} out of range [0, {self.hidden})")
        with T.no_grad():
            h = self._hidden(Tensor(np.array([[probe_x]], dtype=T.get_default_dtype())))
        return float(h.data[0, unit_index])


def record_trace(trace: ActivationTrace, probe: QuadraticProbe, unit_index: int,
                 probe_x: float, epoch: int) -> None:
    """Append the watched unit's activation for one (completed) epoch."""
    if epoch != len(trace):
        raise ContractError(f"epochs must be contiguous: expected {len(trace)}, got {epoch}")
    trace.append(probe.hidden_activation(probe_x, unit_index))


def run_quadratic_probe(seed: int, epochs: int, hidden: int = 16, lr: float = 0.05,
                        unit_index: int = 0, probe_x: float = 0.5) -> ActivationTrace:
    """Train the probe net and record one activation per epoch."""
    probe = QuadraticProbe(seed=seed, hidden=hidden, lr=lr)
    trace = ActivationTrace(probe_id=f"fc1[{unit_index}]@x={probe_x}")
    for epoch in range(epochs):
        probe.train_epoch(epoch)
        record_trace(trace, probe, unit_index, probe_x, epoch)
    return trace


# ---------------------------------------------------------------------------
# artifacts


def write_trace_csv(trace: ActivationTrace, path) -> None:
    # full round-trip precision: forecasts are re-derived from this file
    with open(path, "w") as f:
        f.write("epoch,value\n")
        for epoch, value in enumerate(trace.values):
            f.write(f"{epoch},{float(value)!r}\n")


def write_fit_json(model: ArimaModel, path, probe_id: str = "") -> None:
    res = model.residuals if model.residuals is not None else np.zeros(0)
    payload = {
        "probe_id": probe_id,
        "orders": {"p": model.p, "d": model.d, "q": model.q},
        "ar": [float(v) for v in model.ar],
        "ma": [float(v) for v in model.ma],
        "intercept": model.intercept,
        "sigma2": model.sigma2,
        "stationary": model.stationary,
        "residual_diagnostics": {
            "n": int(len(res)),
            "mean": float(res.mean()) if len(res) else 0.0,
            "std": float(res.std()) if len(res) else 0.0,
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def write_forecast_csv(start_epoch: int, predicted, actual, path) -> None:
    """Rows: epoch, predicted, actual (blank when unknown)."""
    with open(path, "w") as f:
        f.write("epoch,predicted,actual\n")
        for i, pred in enumerate(predicted):
            act = "" if actual is None or i >= len(actual) else repr(float(actual[i]))
            f.write(f"{start_epoch + i},{float(pred)!r},{act}\n")
