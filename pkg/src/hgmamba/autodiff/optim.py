"""Named parameter registry, AdamW, and the exponential learning-rate schedule."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .. import numeric
from .tensor import Tensor


class Param(Tensor):
    """A trainable leaf tensor with AdamW moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


class ParamStore:
    """Ordered name -> :class:`Param` map plus non-trainable buffers.

    Buffers hold state such as batch-norm running statistics; they are
    checkpointed alongside parameters but never updated by the optimizer.
    """

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or numeric.default_dtype())
        self.params: dict[str, Param] = {}
        self.bn_stats: dict[str, numeric.BatchNormStats] = {}
        self.step = 0

    def add(self, name: str, value) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(np.asarray(value, dtype=self.dtype), name=name)
        self.params[name] = p
        return p

    def add_batchnorm(self, name: str, features: int) -> numeric.BatchNormStats:
        if name in self.bn_stats:
            raise KeyError(f"duplicate buffer name {name!r}")
        stats = numeric.BatchNormStats(features, dtype=self.dtype)
        self.bn_stats[name] = stats
        return stats

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, s in self.bn_stats.items():
            out[f"{name}.running_mean"] = s.mean
            out[f"{name}.running_var"] = s.var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, s in self.bn_stats.items():
            s.mean = np.asarray(buffers[f"{name}.running_mean"], dtype=self.dtype).copy()
            s.var = np.asarray(buffers[f"{name}.running_var"], dtype=self.dtype).copy()


def adamw_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> ParamStore:
    """One decoupled-weight-decay Adam update over every parameter.

    Parameters without a gradient are treated as having a zero gradient.
    Raises ``NumericError`` naming the first parameter whose gradient is
    not finite, before touching any state.
    """
    for p in store:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise numeric.NumericError(f"non-finite gradient for parameter {p.name!r}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in store:
        g = p.grad.astype(store.dtype, copy=False) if p.grad is not None else np.zeros_like(p.data)
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        update = (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)
        p.data = (p.data * (1.0 - lr * weight_decay) - lr * update).astype(store.dtype, copy=False)
        p.grad = None
    return store


def lr_schedule(epoch: int, initial: float = 5e-4, decay: float = 0.99) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return initial * decay**epoch
