"""Parameterized building blocks that register their weights in a ParamStore."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ParamStore, Tensor, ops


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = store.add(f"{name}.weight", uniform_fan_in(rng, fan_in, (fan_in, fan_out)))
        self.bias = store.add(f"{name}.bias", uniform_fan_in(rng, fan_in, (fan_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gain, self.bias)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))
        self.stats = store.add_batchnorm(name, dim)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm(x, self.stats, self.gain, self.bias, training)


class FeedForward:
    """Pre-norm residual MLP: ``x + W2 gelu(W1 LayerNorm(x))``."""

    def __init__(self, store: ParamStore, name: str, dim: int, ratio: int, rng: np.random.Generator):
        hidden = dim * ratio
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(ops.gelu(self.fc1(self.norm(x))))
