"""Small numpy building blocks shared by the forecaster and the critic."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    """The loss or a parameter became non-finite during training."""


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        out["adam_t"] = np.array(self.t)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            if f"adam_m/{k}" in arrays:
                self.m[k] = arrays[f"adam_m/{k}"].copy()
                self.v[k] = arrays[f"adam_v/{k}"].copy()
        self.t = int(arrays.get("adam_t", 0))


def check_finite(loss: float, params: dict[str, np.ndarray], where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"{where}: loss became {loss}")
    bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
    if bad:
        raise TrainingDivergedError(f"{where}: non-finite parameters {bad}")


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``arrays`` plus a JSON header to a ``.npz`` file."""
    header = {"schema_version": CHECKPOINT_VERSION, "kind": kind, **meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    if meta.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('schema_version')}")
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return arrays, meta
