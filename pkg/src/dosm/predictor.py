"""Demand forecasting: Z-score scaling, a stacked GRU regressor and utilisation.

One forecaster is trained per service.  Its input is a window of per-edge
demand vectors and its output the per-edge demand for each of the next
``horizon`` slots.  Every window is standardised with its own per-edge
mean and population standard deviation; targets use the same scaler.

GRU cell, per time step (``*`` is element-wise)::

    z  = sigmoid(x Wz + h Uz + bz)          update gate
    r  = sigmoid(x Wr + h Ur + br)          reset gate
    n  = tanh(x Wh + (r * h) Uh + bh)       candidate state
    h' = (1 - z) * h + z * n
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .catalog import NetworkConfig
from .nn import Adam, check_finite, load_checkpoint, save_checkpoint, sigmoid, uniform_init


class InsufficientDataError(ValueError):
    pass


def zscore_fit_transform(series):
    """Standardise each column of ``series`` (time along axis 0)."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise InsufficientDataError("Z-score needs at least two observations")
    scaler = StandardScaler().fit(x)
    return scaler.transform(x), scaler


def window_scale(windows: np.ndarray):
    """Per-window, per-feature mean and population std of ``(N, T, F)`` windows.

    Same convention as :func:`zscore_fit_transform`: a constant feature gets
    scale 1.
    """
    mean = windows.mean(axis=1, keepdims=True)
    scale = windows.std(axis=1, keepdims=True)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def utilization(predicted_demand: float, instances: int, capacity: int) -> float:
    """Percent of the deployed instances' capacity the demand would use."""
    if instances < 1:
        raise ValueError("utilisation is undefined without instances")
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    return 100.0 * predicted_demand / (instances * capacity)


def mean_prediction_error(predicted, observed) -> float:
    """Mean of ``|observed - predicted| / observed`` over entries with ``observed > 0``."""
    p = np.asarray(predicted, dtype=float).ravel()
    o = np.asarray(observed, dtype=float).ravel()
    if p.shape != o.shape:
        raise ValueError("predicted and observed differ in length")
    valid = o > 0
    if not valid.any():
        raise ValueError("no positive observations; prediction error undefined")
    return float(np.mean(np.abs(o[valid] - p[valid]) / o[valid]))


def make_windows(series: np.ndarray, window: int, horizon: int, stride: int = 1):
    """Slice a ``(T, F)`` series into ``(inputs, targets)`` window pairs."""
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    starts = range(0, series.shape[0] - window - horizon + 1, stride)
    X = np.stack([series[s:s + window] for s in starts]) if len(starts) else \
        np.empty((0, window, series.shape[1]))
    y = np.stack([series[s + window:s + window + horizon] for s in starts]) if len(starts) else \
        np.empty((0, horizon, series.shape[1]))
    return X, y


# ---------------------------------------------------------------------------
# network

def _gru_layer_forward(x, Wx, Uzr, Uh, b):
    B, T, _ = x.shape
    H = Uh.shape[0]
    xw = x @ Wx + b
    h = np.zeros((B, H))
    hs = np.empty((B, T, H))
    cache = []
    for t in range(T):
        a = xw[:, t, :2 * H] + h @ Uzr
        zr = sigmoid(a)
        z, r = zr[:, :H], zr[:, H:]
        rh = r * h
        n = np.tanh(xw[:, t, 2 * H:] + rh @ Uh)
        h_new = h + z * (n - h)
        cache.append((h, z, r, n, rh))
        h = h_new
        hs[:, t] = h
    return hs, cache


def _gru_layer_backward(x, dhs, Wx, Uzr, Uh, cache):
    B, T, _ = x.shape
    H = Uh.shape[0]
    dxw = np.empty((B, T, 3 * H))
    dUzr = np.zeros_like(Uzr)
    dUh = np.zeros_like(Uh)
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, z, r, n, rh = cache[t]
        dh = dhs[:, t] + dh_next
        da_h = dh * z * (1.0 - n * n)
        dz = dh * (n - h_prev)
        dh_prev = dh * (1.0 - z)
        dUh += rh.T @ da_h
        drh = da_h @ Uh.T
        dr = drh * h_prev
        dh_prev += drh * r
        da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        dUzr += h_prev.T @ da_zr
        dh_prev += da_zr @ Uzr.T
        dxw[:, t, :2 * H] = da_zr
        dxw[:, t, 2 * H:] = da_h
        dh_next = dh_prev
    flat = dxw.reshape(B * T, 3 * H)
    dWx = x.reshape(B * T, -1).T @ flat
    db = flat.sum(axis=0)
    dx = dxw @ Wx.T
    return dx, dWx, dUzr, dUh, db


@dataclass
class GruModel:
    """Parameters of a stacked GRU followed by a ReLU dense head and a linear output."""
    n_features: int
    hidden_sizes: tuple[int, ...] = (400, 200)
    dense_sizes: tuple[int, ...] = (100, 100)
    window: int = 150
    horizon: int = 15
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.dense_sizes = tuple(int(d) for d in self.dense_sizes)
        if not self.params:
            self.params = self._init_params()

    @property
    def n_outputs(self) -> int:
        return self.horizon * self.n_features

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        p = {}
        fan = self.n_features
        for i, H in enumerate(self.hidden_sizes):
            p[f"gru{i}.Wx"] = uniform_init(rng, fan, (fan, 3 * H))
            p[f"gru{i}.Uzr"] = uniform_init(rng, H, (H, 2 * H))
            p[f"gru{i}.Uh"] = uniform_init(rng, H, (H, H))
            p[f"gru{i}.b"] = np.zeros(3 * H)
            fan = H
        for i, D in enumerate(self.dense_sizes + (self.n_outputs,)):
            p[f"fc{i}.W"] = uniform_init(rng, fan, (fan, D))
            p[f"fc{i}.b"] = np.zeros(D)
            fan = D
        return p

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Standardised windows ``(B, window, F)`` to standardised forecasts ``(B, outputs)``."""
        p = self.params
        caches = []
        h = x
        for i in range(len(self.hidden_sizes)):
            inp = h
            h, cache = _gru_layer_forward(inp, p[f"gru{i}.Wx"], p[f"gru{i}.Uzr"],
                                          p[f"gru{i}.Uh"], p[f"gru{i}.b"])
            caches.append((inp, cache))
        a = h[:, -1]
        dense = []
        n_fc = len(self.dense_sizes) + 1
        for i in range(n_fc):
            pre = a @ p[f"fc{i}.W"] + p[f"fc{i}.b"]
            dense.append((a, pre))
            a = np.maximum(pre, 0.0) if i < n_fc - 1 else pre
        if keep_cache:
            self._cache = (caches, dense, h.shape)
        return a

    def backward(self, dout: np.ndarray) -> dict[str, np.ndarray]:
        caches, dense, hshape = self._cache
        p = self.params
        g = {}
        n_fc = len(dense)
        da = dout
        for i in range(n_fc - 1, -1, -1):
            a_in, pre = dense[i]
            if i < n_fc - 1:
                da = da * (pre > 0)
            g[f"fc{i}.W"] = a_in.T @ da
            g[f"fc{i}.b"] = da.sum(axis=0)
            da = da @ p[f"fc{i}.W"].T
        dhs = np.zeros(hshape)
        dhs[:, -1] = da
        for i in range(len(self.hidden_sizes) - 1, -1, -1):
            inp, cache = caches[i]
            dhs, g[f"gru{i}.Wx"], g[f"gru{i}.Uzr"], g[f"gru{i}.Uh"], g[f"gru{i}.b"] = \
                _gru_layer_backward(inp, dhs, p[f"gru{i}.Wx"], p[f"gru{i}.Uzr"],
                                    p[f"gru{i}.Uh"], cache)
        self._cache = None
        return g

    def loss_and_grad(self, x, y):
        """Mean squared error over all outputs, and its parameter gradient."""
        out = self.forward(x, keep_cache=True)
        diff = out - y.reshape(len(y), -1)
        loss = float(np.mean(diff * diff))
        return loss, self.backward(2.0 * diff / diff.size)

    def gates(self, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """``(z, r, n)`` activations of every layer and step, for inspection."""
        p = self.params
        out = []
        h = x
        for i in range(len(self.hidden_sizes)):
            h, cache = _gru_layer_forward(h, p[f"gru{i}.Wx"], p[f"gru{i}.Uzr"],
                                          p[f"gru{i}.Uh"], p[f"gru{i}.b"])
            out.append(tuple(np.stack([c[k] for c in cache]) for k in (1, 2, 3)))
        return out

    def meta(self) -> dict:
        return {"n_features": self.n_features, "hidden_sizes": list(self.hidden_sizes),
                "dense_sizes": list(self.dense_sizes), "window": self.window,
                "horizon": self.horizon, "seed": self.seed}


def gru_forward(model: GruModel, window) -> np.ndarray:
    """Forecast for one standardised window ``(window, F)``; flat ``horizon * F`` vector."""
    x = np.asarray(window, dtype=float)
    if x.ndim != 2 or x.shape != (model.window, model.n_features):
        raise ValueError(f"window shape {x.shape} != {(model.window, model.n_features)}")
    return model.forward(x[None])[0]


@dataclass
class TrainingReport:
    losses: list[float]
    steps: int


def gru_train(model: GruModel, X, y, epochs: int = 150, batch_size: int = 150,
              learning_rate: float = 1e-3, seed: int | None = None,
              optimizer: Adam | None = None) -> TrainingReport:
    """Adam on the MSE of standardised windows; ``losses[k]`` is the epoch-``k`` mean batch loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0:
        raise InsufficientDataError("empty training set")
    rng = np.random.default_rng(model.seed if seed is None else seed)
    opt = optimizer or Adam(model.params, lr=learning_rate)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total, seen = 0.0, 0
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = model.loss_and_grad(X[idx], y[idx])
            check_finite(loss, model.params, f"GRU epoch {epoch}")
            opt.step(model.params, grads)
            total += loss * len(idx)
            seen += len(idx)
        losses.append(total / seen)
    return TrainingReport(losses, opt.t)


# ---------------------------------------------------------------------------
# estimator

class GruForecaster(BaseEstimator, RegressorMixin):
    """Windowed demand forecaster with a scikit-learn interface.

    ``fit(X, y)`` takes raw windows ``(N, window, F)`` and raw targets
    ``(N, horizon, F)``; ``predict(X)`` returns non-negative raw forecasts.
    """

    def __init__(self, hidden_sizes=(400, 200), dense_sizes=(100, 100), window=150,
                 horizon=None, epochs=150, batch_size=150, learning_rate=1e-3,
                 random_state=0):
        self.hidden_sizes = hidden_sizes
        self.dense_sizes = dense_sizes
        self.window = window
        self.horizon = horizon
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    @property
    def horizon_(self) -> int:
        return self.horizon or math.ceil(0.10 * self.window)

    def _check_windows(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[1] != self.window:
            raise ValueError(f"expected windows of shape (N, {self.window}, F), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("windows contain non-finite values")
        return X

    def fit(self, X, y):
        X = self._check_windows(X)
        y = np.asarray(y, dtype=float)
        if y.shape != (len(X), self.horizon_, X.shape[2]):
            raise ValueError(f"targets must be (N, {self.horizon_}, F), got {y.shape}")
        self.n_features_in_ = X.shape[2]
        self.model_ = GruModel(X.shape[2], self.hidden_sizes, self.dense_sizes,
                               self.window, self.horizon_, self.random_state)
        self.optimizer_ = Adam(self.model_.params, lr=self.learning_rate)
        mean, scale = window_scale(X)
        report = gru_train(self.model_, (X - mean) / scale, (y - mean) / scale,
                           self.epochs, self.batch_size, optimizer=self.optimizer_)
        self.loss_curve_ = report.losses
        return self

    def fit_series(self, series, stride: int = 1):
        X, y = make_windows(series, self.window, self.horizon_, stride)
        if len(X) == 0:
            raise InsufficientDataError(
                f"series of length {len(series)} is shorter than window + horizon")
        return self.fit(X, y)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check_windows(X)
        mean, scale = window_scale(X)
        out = self.model_.forward((X - mean) / scale)
        out = out.reshape(len(X), self.horizon_, self.n_features_in_) * scale + mean
        return np.maximum(out, 0.0)

    def score(self, X, y, sample_weight=None):
        """Negative mean prediction error, so larger is better."""
        return -mean_prediction_error(self.predict(X), y)

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "model_")
        arrays = dict(self.model_.params)
        arrays.update(self.optimizer_.state())
        meta = {"model": self.model_.meta(), "estimator": self.get_params(),
                "loss_curve": self.loss_curve_, **(extra or {})}
        meta["estimator"]["hidden_sizes"] = list(self.hidden_sizes)
        meta["estimator"]["dense_sizes"] = list(self.dense_sizes)
        save_checkpoint(path, "gru", arrays, meta)

    @classmethod
    def load(cls, path) -> "GruForecaster":
        arrays, meta = load_checkpoint(path, "gru")
        est = cls(**meta["estimator"])
        m = meta["model"]
        params = {k: v for k, v in arrays.items() if not k.startswith("adam")}
        est.model_ = GruModel(m["n_features"], tuple(m["hidden_sizes"]),
                              tuple(m["dense_sizes"]), m["window"], m["horizon"],
                              m["seed"], params)
        est.optimizer_ = Adam(est.model_.params, lr=est.learning_rate)
        est.optimizer_.load_state(arrays)
        est.n_features_in_ = m["n_features"]
        est.loss_curve_ = meta.get("loss_curve", [])
        est.meta_ = meta
        return est


@dataclass
class FramePrediction:
    start_slot: int
    values: np.ndarray          # horizon x features, raw demand, >= 0
    mean: np.ndarray
    scale: np.ndarray
    fallback: bool = False

    @property
    def horizon(self) -> int:
        return len(self.values)

    def frame_mean_total(self) -> float:
        """Mean over the frame of the demand summed over edges."""
        return float(self.values.sum(axis=1).mean())


def predict_frame(model: GruForecaster | None, history, cfg: NetworkConfig,
                  horizon: int | None = None) -> FramePrediction:
    """Forecast the next frame from the most recent window of ``history`` ``(T, F)``.

    Falls back to repeating the last observation (flagged) when there is no
    model or the history is shorter than the model's window.
    """
    history = np.asarray(history, dtype=float)
    if history.ndim == 1:
        history = history[:, None]
    horizon = horizon or (model.horizon_ if model is not None else cfg.frame_slots)
    start = len(history)
    if model is None or len(history) < model.window:
        last = history[-1] if len(history) else np.zeros(history.shape[1])
        values = np.tile(np.maximum(last, 0.0), (horizon, 1))
        return FramePrediction(start, values, np.zeros(len(last)), np.ones(len(last)), True)
    window = history[-model.window:][None]
    mean, scale = window_scale(window)
    values = model.predict(window)[0][:horizon]
    return FramePrediction(start, values, mean[0, 0], scale[0, 0], False)


def sinusoid_demand(seed: int, n_slots: int, n_edges: int = 9, period: float = 60.0,
                    base=(40.0, 80.0), depth: float = 0.5, noise: float = 1.0) -> np.ndarray:
    """Synthetic per-edge demand: phase-shifted sinusoids plus Gaussian noise, rounded."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_slots)[:, None]
    level = rng.uniform(*base, n_edges)
    phase = rng.uniform(0, 2 * np.pi, n_edges)
    clean = level * (1.0 + depth * np.sin(2 * np.pi * t / period + phase))
    return np.maximum(np.rint(clean + rng.normal(0, noise, clean.shape)), 0.0)
