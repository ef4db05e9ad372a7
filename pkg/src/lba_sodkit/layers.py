"""Parameter storage, initialisation, and the small layer vocabulary
(conv, CBR, squeeze-excitation) shared by the network modules."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor

SE_RATIO = 16
SE_MIN_HIDDEN = 4


class ParamStore:
    """Ordered name -> Tensor map of learnable values.

    Each entry is a leaf Tensor with ``requires_grad=True``; its ``.grad``
    buffer always has the value's shape. Insertion order is the canonical
    ordering used for serialisation.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._entries[name] = t
        return t

    @classmethod
    def wrap(cls, tensors: dict[str, Tensor]) -> "ParamStore":
        """Store the given Tensor objects themselves (no copy)."""
        out = cls()
        out._entries = dict(tensors)
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._entries.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._entries.items():
            out.add(k, t.data.copy())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values from ``arrays``; names and shapes must match exactly."""
        for name, t in self._entries.items():
            if name not in arrays:
                raise KeyError(name)
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.shape:
                raise ValueError(f"{name}: shape {a.shape} != expected {t.shape}")
        for name, t in self._entries.items():
            t.data = np.array(arrays[name], dtype=np.float64)
            t.zero_grad()


def se_hidden(channels: int) -> int:
    return max(channels // SE_RATIO, SE_MIN_HIDDEN)


class Initializer:
    """Kaiming-uniform (fan-in) weights, zero biases, BN gamma=1 / beta=0."""

    def __init__(self, store: ParamStore, rng: np.random.Generator):
        self.store = store
        self.rng = rng

    def _uniform(self, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def conv(self, name: str, co: int, ci: int, k: int) -> None:
        self.store.add(f"{name}.weight", self._uniform((co, ci, k, k), ci * k * k))
        self.store.add(f"{name}.bias", np.zeros(co))

    def deconv(self, name: str, ci: int, co: int, k: int) -> None:
        # k == stride, so each output pixel sees exactly ci inputs
        self.store.add(f"{name}.weight", self._uniform((ci, co, k, k), ci))
        self.store.add(f"{name}.bias", np.zeros(co))

    def fc(self, name: str, co: int, ci: int) -> None:
        self.store.add(f"{name}.weight", self._uniform((co, ci), ci))
        self.store.add(f"{name}.bias", np.zeros(co))

    def bn(self, name: str, c: int) -> None:
        self.store.add(f"{name}.gamma", np.ones(c))
        self.store.add(f"{name}.beta", np.zeros(c))

    def cbr(self, name: str, co: int, ci: int, k: int) -> None:
        self.conv(f"{name}.conv", co, ci, k)
        self.bn(f"{name}.bn", co)

    def se(self, name: str, c: int) -> None:
        hid = se_hidden(c)
        self.fc(f"{name}.fc1", hid, c)
        self.fc(f"{name}.fc2", c, hid)


def conv(x: Tensor, P: ParamStore, name: str, stride: int = 1) -> Tensor:
    return ops.conv2d(x, P[f"{name}.weight"], P[f"{name}.bias"], stride=stride)


def deconv(x: Tensor, P: ParamStore, name: str) -> Tensor:
    w = P[f"{name}.weight"]
    return ops.conv_transpose2d(x, w, P[f"{name}.bias"], stride=w.shape[2])


def fc(x: Tensor, P: ParamStore, name: str) -> Tensor:
    return ops.fully_connected(x, P[f"{name}.weight"], P[f"{name}.bias"])


def cbr(x: Tensor, P: ParamStore, name: str, stride: int = 1) -> Tensor:
    """Convolution, batch normalisation, ReLU."""
    y = conv(x, P, f"{name}.conv", stride)
    y = ops.batchnorm(y, P[f"{name}.bn.gamma"], P[f"{name}.bn.beta"])
    return ops.relu(y)


def se_gate(x: Tensor, P: ParamStore, name: str) -> Tensor:
    """Squeeze-excitation channel gate in (0, 1), shape (n, c, 1, 1)."""
    z = ops.global_avg_pool(x)
    z = ops.relu(fc(z, P, f"{name}.fc1"))
    return ops.sigmoid(fc(z, P, f"{name}.fc2"))


def channel_attention(x: Tensor, P: ParamStore, name: str, force_gate_ones: bool = False) -> Tensor:
    """Recalibrate channels of ``x`` by its squeeze-excitation gate."""
    if force_gate_ones:
        return x
    return ops.mul(x, se_gate(x, P, name))
