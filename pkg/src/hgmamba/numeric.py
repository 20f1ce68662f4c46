"""Dense array primitives shared by every other module.

Arrays are plain row-major ``numpy.ndarray`` values. The functions here are
the forward halves of the differentiable primitives in
:mod:`hgmamba.autodiff.ops`; they validate shapes and never mutate inputs.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype_override: list[np.dtype] = []


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


def default_dtype() -> np.dtype:
    """Runtime float type: innermost ``precision()`` context, else ``HGM_PRECISION`` (f32)."""
    if _dtype_override:
        return _dtype_override[-1]
    name = os.environ.get("HGM_PRECISION", "f32").lower()
    if name not in _PRECISIONS:
        raise ValueError(f"HGM_PRECISION must be one of {sorted(_PRECISIONS)}, got {name!r}")
    return np.dtype(_PRECISIONS[name])


@contextlib.contextmanager
def precision(name: str):
    _dtype_override.append(np.dtype(_PRECISIONS[name]))
    try:
        yield
    finally:
        _dtype_override.pop()


def asarray(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype or default_dtype())
    if arr.ndim and 0 in arr.shape:
        raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
    return arr


def check_index(shape: tuple[int, ...], index: tuple[int, ...]) -> None:
    """Bounds check without numpy's negative-index wraparound."""
    if len(index) != len(shape):
        raise IndexError(f"index {index} has {len(index)} entries for shape {shape}")
    for i, (k, n) in enumerate(zip(index, shape)):
        if not 0 <= k < n:
            raise IndexError(f"index {k} out of range for axis {i} with size {n}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    return np.matmul(a, b)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


class BatchNormStats:
    """Running mean/variance for one feature-wise batch norm.

    Starts at mean 0 / variance 1, so evaluating before any training step is
    an identity transform up to the affine parameters.
    """

    def __init__(self, features: int, dtype=None):
        dtype = dtype or default_dtype()
        self.mean = np.zeros(features, dtype=dtype)
        self.var = np.ones(features, dtype=dtype)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = BN_MOMENTUM
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)


def batchnorm_features(
    x: np.ndarray,
    stats: BatchNormStats,
    gain: np.ndarray,
    bias: np.ndarray,
    training: bool,
) -> np.ndarray:
    """Normalize the last axis using statistics pooled over all leading axes."""
    d = x.shape[-1]
    if stats.mean.shape != (d,) or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"batchnorm parameters do not match feature dim {d}")
    if training:
        flat = x.reshape(-1, d)
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        n = flat.shape[0]
        stats.update(mu, var * n / max(n - 1, 1))
    else:
        mu, var = stats.mean, stats.var
    return (x - mu) / np.sqrt(var + BN_EPS) * gain + bias


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def flip(x: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(x, axis=axis)


def _check_gather_index(x: np.ndarray, axis: int, idx: np.ndarray) -> None:
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis {axis} with size {n}")


def gather(x: np.ndarray, axis: int, idx: np.ndarray) -> np.ndarray:
    """``take_along_axis`` with strict bounds; ``idx`` broadcasts against ``x``."""
    idx = np.asarray(idx)
    if idx.ndim != x.ndim:
        raise DimensionError(f"gather index rank {idx.ndim} != array rank {x.ndim}")
    _check_gather_index(x, axis, idx)
    shape = list(np.broadcast_shapes(x.shape[:axis] + (1,) + x.shape[axis + 1:],
                                     idx.shape[:axis] + (1,) + idx.shape[axis + 1:]))
    shape[axis] = idx.shape[axis]
    return np.take_along_axis(x, np.broadcast_to(idx, shape), axis=axis)


def inverse_permutation(idx: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.argsort(idx, axis=axis, kind="stable")


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


def concat(xs, axis: int = -1) -> np.ndarray:
    return np.concatenate(xs, axis=axis)


def direct_causal_conv(signal: np.ndarray, kernel: np.ndarray, axis: int = 0) -> np.ndarray:
    """O(L^2) reference: ``y[t] = sum_{s<=t} kernel[s] * signal[t-s]``."""
    x = np.moveaxis(np.asarray(signal), axis, 0)
    k = np.moveaxis(np.asarray(kernel), axis, 0)
    L = x.shape[0]
    if L == 0:
        raise DimensionError("convolution of empty sequence")
    y = np.zeros(np.broadcast_shapes(x.shape, k.shape), dtype=np.result_type(x, k))
    for s in range(L):
        y[s:] += k[s] * x[: L - s]
    return np.moveaxis(y, 0, axis)


def rfft_conv(signal: np.ndarray, kernel: np.ndarray, axis: int = -1) -> np.ndarray:
    """Causal convolution of equal-length sequences through a zero-padded real FFT."""
    L = signal.shape[axis]
    if L == 0:
        raise DimensionError("convolution of empty sequence")
    if kernel.shape[axis] != L:
        raise DimensionError(f"signal length {L} != kernel length {kernel.shape[axis]}")
    n = 1 << (2 * L - 1).bit_length()
    fx = np.fft.rfft(signal, n=n, axis=axis)
    fk = np.fft.rfft(kernel, n=n, axis=axis)
    y = np.fft.irfft(fx * fk, n=n, axis=axis)
    y = np.take(y, np.arange(L), axis=axis)
    return y.astype(np.result_type(signal, kernel), copy=False)


def element(x: np.ndarray, index: tuple[int, ...]):
    check_index(x.shape, tuple(index))
    return x[tuple(index)]
