"""Differentiable primitives.

Each op computes its value with :mod:`hgmamba.numeric` and registers a
closure that maps the output cotangent to input cotangents.
"""

from __future__ import annotations

import numpy as np

from .. import numeric
from .tensor import Tensor, make_result


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or numeric.default_dtype()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result("add", (a, b), a.data + b.data,
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result("sub", (a, b), a.data - b.data,
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = b
        return make_result("scale", (a,), a.data * c, lambda g: (g * c,))
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result("mul", (a, b), a.data * b.data,
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    numeric.hadamard(a.data, b.data)
    return mul(a, b)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / b)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data
    return make_result("div", (a, b), out,
                       lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", (x,), out, lambda g: (g * out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result("tanh", (x,), out, lambda g: (g * (1 - out * out),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", (x,), numeric.relu(x.data), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    v = x.data
    c = numeric._GELU_C
    inner = c * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1 + t)

    def backward(g):
        d = 0.5 * (1 + t) + 0.5 * v * (1 - t * t) * c * (1 + 3 * 0.044715 * v * v)
        return (g * d,)

    return make_result("gelu", (x,), out.astype(v.dtype, copy=False), backward)


def softplus(x: Tensor) -> Tensor:
    out = numeric.softplus(x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result("softplus", (x,), out, lambda g: (g * sig,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = numeric.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", (a, b), out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != weight.shape[0]:
        raise numeric.DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data).reshape(*lead, weight.shape[1])
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("linear", inputs, out, backward)


# ---------------------------------------------------------------- shape

def reshape(x: Tensor, shape) -> Tensor:
    return make_result("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result("index", (x,), np.array(out), backward)


def flip(x: Tensor, axis: int) -> Tensor:
    return make_result("flip", (x,), np.ascontiguousarray(numeric.flip(x.data, axis)),
                       lambda g: (np.flip(g, axis=axis),))


def gather(x: Tensor, axis: int, idx: np.ndarray) -> Tensor:
    """Gather along ``axis``; ``idx`` is a constant of the forward pass."""
    idx = np.asarray(idx)
    out = numeric.gather(x.data, axis, idx)

    def backward(g):
        full_idx = np.broadcast_to(idx, g.shape) if idx.shape != g.shape else idx
        gx = np.zeros_like(x.data)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis] = full_idx
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return make_result("gather", (x,), out, backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    out = numeric.concat([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result("concat", tuple(xs), out, backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", (x,), out, backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- fused layers

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = numeric.softmax(x.data, axis=axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", (x,), out, backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + numeric.LN_EPS)
    xhat = xc * inv
    out = numeric.layernorm(v, gain.data, bias.data)

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return make_result("layernorm", (x, gain, bias), out, backward)


def batchnorm(x: Tensor, stats: numeric.BatchNormStats, gain: Tensor, bias: Tensor, training: bool) -> Tensor:
    d = x.shape[-1]
    out = numeric.batchnorm_features(x.data, stats, gain.data, bias.data, training)
    flat = x.data.reshape(-1, d)
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + numeric.BN_EPS)
    xhat = (flat - mu) * inv

    def backward(g):
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat).sum(axis=0)
        gbias = g2.sum(axis=0)
        gh = g2 * gain.data
        if training:
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        else:
            gx = gh * inv
        return gx.reshape(x.shape), ggain, gbias

    return make_result("batchnorm", (x, gain, bias), out, backward)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    v = x.data
    out = np.sqrt((v * v).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        return (v * np.expand_dims(scale, axis),)

    return make_result("norm", (x,), out, backward)
