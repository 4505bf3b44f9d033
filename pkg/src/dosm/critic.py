"""Value network: scores the current network state's service quality in [0, 1].

The critic is a ReLU multilayer perceptron with a single logistic output.
It is trained on mean squared error against a target derived from the
observed per-service delay: 0 at or beyond the service's delay threshold,
rising linearly to 1 as the delay goes to 0.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .catalog import Placement, ServiceSpec
from .nn import Adam, check_finite, load_checkpoint, save_checkpoint, sigmoid, uniform_init


def target_value(feedback: float, threshold: float) -> float:
    """Quality target for an observed mean delay ``feedback`` against ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if feedback < 0:
        raise ValueError("feedback must be non-negative")
    if feedback >= threshold:
        return 0.0
    return (threshold - feedback) / threshold


def encode_state(demand: np.ndarray, placement: Placement, per_service_delay,
                 services: list[ServiceSpec]) -> np.ndarray:
    """Flat state vector.

    Layout, each block row-major over (edge, service):
    demand / instance capacity, placement counts, then per-service
    mean delay / delay threshold.  Length ``2 * E * S + S``.
    """
    demand = np.asarray(demand, dtype=float)
    cap = np.array([s.capacity for s in services], dtype=float)
    thr = np.array([s.delay_threshold_s for s in services])
    delay = np.asarray(per_service_delay, dtype=float)
    if demand.shape != placement.counts.shape or delay.shape != (len(services),):
        raise ValueError("state components have inconsistent dimensions")
    return np.concatenate([(demand / cap).ravel(), placement.counts.astype(float).ravel(),
                           delay / thr])


def critic_input(state: np.ndarray, service: int, n_services: int) -> np.ndarray:
    """Append a one-hot tag for the service being scored."""
    tag = np.zeros(n_services)
    tag[service] = 1.0
    return np.concatenate([state, tag])


@dataclass
class Experience:
    state: np.ndarray          # critic input, tag included
    action_tag: str
    feedback: float
    target: float

    def __post_init__(self):
        if self.feedback < 0 or not 0.0 <= self.target <= 1.0:
            raise ValueError("feedback must be >= 0 and target in [0, 1]")


@dataclass
class ReplayBuffer:
    capacity: int = 5000
    items: deque = field(default_factory=deque)

    def push(self, exp: Experience) -> None:
        self.items.append(exp)
        while len(self.items) > self.capacity:
            self.items.popleft()

    def __len__(self):
        return len(self.items)

    def arrays(self):
        X = np.stack([e.state for e in self.items])
        y = np.array([e.target for e in self.items])
        return X, y


class ValueNet:
    """Parameters and forward/backward passes of the critic MLP."""

    def __init__(self, n_inputs: int, hidden_sizes=(512, 256, 64), seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.n_inputs = n_inputs
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.seed = seed
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            fan = n_inputs
            for i, h in enumerate(self.hidden_sizes + (1,)):
                params[f"fc{i}.W"] = uniform_init(rng, fan, (fan, h))
                params[f"fc{i}.b"] = np.zeros(h)
                fan = h
        self.params = params

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def forward(self, X: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        a = X
        cache = []
        for i in range(self.n_layers):
            pre = a @ self.params[f"fc{i}.W"] + self.params[f"fc{i}.b"]
            cache.append((a, pre))
            a = np.maximum(pre, 0.0) if i < self.n_layers - 1 else pre
        q = sigmoid(a[:, 0])
        if keep_cache:
            self._cache = (cache, q)
        return q

    def loss_and_grad(self, X, y):
        """Mean squared error ``mean((y - Q)^2)`` and its parameter gradient."""
        q = self.forward(X, keep_cache=True)
        cache, _ = self._cache
        diff = q - y
        loss = float(np.mean(diff * diff))
        da = (2.0 * diff / len(y) * q * (1.0 - q))[:, None]
        grads = {}
        for i in range(self.n_layers - 1, -1, -1):
            a_in, pre = cache[i]
            if i < self.n_layers - 1:
                da = da * (pre > 0)
            grads[f"fc{i}.W"] = a_in.T @ da
            grads[f"fc{i}.b"] = da.sum(axis=0)
            da = da @ self.params[f"fc{i}.W"].T
        self._cache = None
        return loss, grads


def q_value(net: ValueNet, state) -> float:
    x = np.asarray(state, dtype=float)
    if x.shape != (net.n_inputs,):
        raise ValueError(f"state length {x.shape} != ({net.n_inputs},)")
    return float(net.forward(x[None])[0])


def critic_loss(net: ValueNet, X, y) -> float:
    q = net.forward(np.asarray(X, dtype=float))
    return float(np.mean((np.asarray(y, dtype=float) - q) ** 2))


@dataclass
class CriticReport:
    losses: list[float]        # full-buffer loss after each episode
    steps: int


def train_critic(net: ValueNet, buffer, episodes: int = 1500, iterations: int = 20,
                 batch_size: int = 100, optimizer: Adam | None = None,
                 rng: np.random.Generator | None = None, learning_rate: float = 1e-3,
                 record_loss: bool = True):
    """Uniform minibatch Adam updates: ``iterations`` steps per episode.

    With ``record_loss`` the loss over the whole buffer is logged after each
    episode; online training skips it.
    """
    if isinstance(buffer, ReplayBuffer):
        if not len(buffer):
            raise ValueError("empty replay buffer")
        X, y = buffer.arrays()
    else:
        X, y = buffer
        X, y = np.asarray(X, float), np.asarray(y, float)
        if not len(X):
            raise ValueError("empty replay buffer")
    rng = rng if rng is not None else np.random.default_rng(net.seed)
    opt = optimizer or Adam(net.params, lr=learning_rate)
    losses = []
    for ep in range(episodes):
        for _ in range(iterations):
            idx = rng.integers(0, len(X), size=min(batch_size, len(X)))
            loss, grads = net.loss_and_grad(X[idx], y[idx])
            check_finite(loss, net.params, f"critic episode {ep}")
            opt.step(net.params, grads)
        if record_loss:
            losses.append(critic_loss(net, X, y))
    return CriticReport(losses, opt.t)


class ValueNetwork(BaseEstimator, RegressorMixin):
    """Critic with a scikit-learn interface; ``predict`` returns Q values in [0, 1].

    ``partial_fit`` runs a single episode on the given experiences and keeps
    the optimiser state, which is how the simulator trains online.
    """

    def __init__(self, hidden_sizes=(512, 256, 64), episodes=1500, iterations=20,
                 batch_size=100, learning_rate=1e-3, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.episodes = episodes
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _init(self, n_inputs):
        self.net_ = ValueNet(n_inputs, self.hidden_sizes, self.random_state)
        self.optimizer_ = Adam(self.net_.params, lr=self.learning_rate)
        self.rng_ = np.random.default_rng(self.random_state)
        self.n_features_in_ = n_inputs
        self.loss_curve_ = []

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        self._init(X.shape[1])
        report = train_critic(self.net_, (X, y), self.episodes, self.iterations,
                              self.batch_size, self.optimizer_, self.rng_)
        self.loss_curve_ = report.losses
        return self

    def partial_fit(self, X, y, episodes: int = 1):
        X = check_array(X)
        if not hasattr(self, "net_"):
            self._init(X.shape[1])
        report = train_critic(self.net_, (X, np.asarray(y, float)), episodes,
                              self.iterations, self.batch_size, self.optimizer_, self.rng_)
        self.loss_curve_.extend(report.losses)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.net_.forward(X)

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "net_")
        arrays = dict(self.net_.params)
        arrays.update(self.optimizer_.state())
        params = self.get_params()
        params["hidden_sizes"] = list(self.hidden_sizes)
        meta = {"estimator": params, "n_inputs": self.n_features_in_,
                "loss_curve": self.loss_curve_, "rng_state": self.rng_.bit_generator.state,
                **(extra or {})}
        save_checkpoint(path, "critic", arrays, meta)

    @classmethod
    def load(cls, path) -> "ValueNetwork":
        arrays, meta = load_checkpoint(path, "critic")
        est = cls(**meta["estimator"])
        params = {k: v for k, v in arrays.items() if not k.startswith("adam")}
        est.net_ = ValueNet(meta["n_inputs"], est.hidden_sizes, est.random_state, params)
        est.optimizer_ = Adam(est.net_.params, lr=est.learning_rate)
        est.optimizer_.load_state(arrays)
        est.rng_ = np.random.default_rng(est.random_state)
        if "rng_state" in meta:
            est.rng_.bit_generator.state = meta["rng_state"]
        est.n_features_in_ = meta["n_inputs"]
        est.loss_curve_ = meta.get("loss_curve", [])
        est.meta_ = meta
        return est
