"""Parameter container and the attention / MLP building blocks."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named trainable tensors. Subclasses register them in ``__init__``."""

    prefix = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}{k}": v for k, v in self.params.items()}

    def num_parameters(self, startswith: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(startswith))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}{k}": v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            arr = np.asarray(state[f"{self.prefix}{k}"], dtype=np.float64)
            if arr.shape != v.shape:
                raise ValueError(f"{self.prefix}{k}: shape {arr.shape} != {v.shape}")
            v.data = arr.copy()
            v.grad = None

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, D) -> (..., heads, T, D/heads)"""
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, heads*dh)"""
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = x.transpose(*range(nd), nd + 1, nd, nd + 2)
    return x.reshape(*lead, n, h * dh)


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis of ``k``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = T.softmax(T.matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)
    return T.matmul(w, v)


def sinusoidal_table(length: int, dim: int, base: float = 10000.0) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freqs = np.exp(-math.log(base) * np.arange(0, dim, 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs[: dim // 2])
    return table


def timestep_features(t: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1]; shape (..., dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * 1000.0 * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)
