"""Named parameter collections and seeded initializers."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .rng import substream

SCHEMES = ("kaiming-uniform", "xavier-uniform", "normal-0.02", "zeros")


class ModelParams(dict):
    """Ordered ``name -> Tensor`` mapping for one encoder or head."""

    def manifest(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.items():
            if arrays[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {v.shape}")
            v.data[...] = arrays[k]

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams((k, Tensor.param(v.data)) for k, v in self.items())


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_tensor(seed: int, name: str, shape, scheme: str, fan_in: int = 0, fan_out: int = 0) -> Tensor:
    """Draw one parameter tensor from the substream ``init/<name>``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    if scheme == "zeros":
        return Tensor.param(np.zeros(shape))
    rng = substream(seed, f"init/{name}")
    if scheme == "kaiming-uniform":
        b = kaiming_bound(fan_in)
        data = rng.uniform(-b, b, shape)
    elif scheme == "xavier-uniform":
        b = xavier_bound(fan_in, fan_out)
        data = rng.uniform(-b, b, shape)
    else:
        data = rng.normal(0.0, 0.02, shape)
    return Tensor.param(data)
