"""Parameter containers, initialisation and the Adam optimiser."""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .autodiff import Tensor, grad

__all__ = ["ParameterSet", "glorot_uniform", "Adam"]


class ParameterSet(Mapping):
    """Ordered, uniquely named trainable tensors with fixed shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, dtype=None):
        self._tensors: dict[str, Tensor] = {}
        for name, value in (arrays or {}).items():
            self.create(name, value, dtype=dtype)

    def create(self, name: str, value, dtype=None) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=dtype, copy=True), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of the current values."""
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self._tensors[name]
        value = np.asarray(value, dtype=t.dtype)
        if value.shape != t.shape:
            raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
        t.data = value.copy()

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self._tensors):
            raise KeyError(f"parameter names differ: {sorted(set(arrays) ^ set(self._tensors))}")
        for k, v in arrays.items():
            self.assign(k, v)

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: t.data.astype(dtype) for k, t in self._tensors.items()})

    def grads(self, loss: Tensor) -> dict[str, np.ndarray]:
        gs = grad(loss, self.tensors())
        return {k: g.data for k, g in zip(self._tensors, gs)}


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


class Adam:
    def __init__(self, params: ParameterSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params._tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params._tensors.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, t in self.params._tensors.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            t.data = (t.data - update).astype(t.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(np.asarray(state["t"]).ravel()[0])
        for k in self.m:
            self.m[k] = np.asarray(state[f"m/{k}"], dtype=self.m[k].dtype).copy()
            self.v[k] = np.asarray(state[f"v/{k}"], dtype=self.v[k].dtype).copy()

