"""State-space sequence layers: discretization, recurrent/convolutional
evaluation, the selective scan, and the bidirectional Mamba block.

All state matrices are diagonal, so ``A`` is stored as an array of shape
``(D, N)``: one length-``N`` diagonal per channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric
from .autodiff import ParamStore, Tensor, as_tensor, make_result, ops
from .layers import LayerNorm, Linear

ZOH_LIMIT = 1e-8
DEFAULT_CHUNK = 64


def _zoh_gain(dA: np.ndarray, delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``(exp(dt*A) - 1) / A``, falling back to ``dt`` where ``|dt*A|`` is tiny."""
    if np.min(np.abs(delta)) * np.min(np.abs(A)) >= ZOH_LIMIT:
        return np.expm1(dA) / A
    dA, delta, A = np.broadcast_arrays(dA, delta, A)
    small = np.abs(dA) < ZOH_LIMIT
    out = np.array(delta, dtype=dA.dtype)
    np.divide(np.expm1(dA), A, out=out, where=~small)
    return out


def discretize(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal SSM.

    Returns ``(Abar, Bbar)`` with ``Abar = exp(delta*A)`` and
    ``Bbar = (exp(delta*A) - 1)/A * B``; all arguments broadcast elementwise.
    """
    A = np.asarray(A)
    if A.dtype.kind != "f":
        A = A.astype(np.float64)
    delta = np.asarray(delta, dtype=A.dtype)
    B = np.asarray(B, dtype=A.dtype)
    if np.any(delta <= 0):
        raise ValueError("discretize: step size delta must be > 0")
    dA = delta * A
    return np.exp(dA), _zoh_gain(dA, delta, A) * B


@dataclass
class DiscreteSsm:
    """Discretized parameters.

    LTI: ``Abar``/``Bbar`` have shape ``(D, N)``.
    Selective: shape ``(L, D, N)``, one pair per sequence position.
    """

    Abar: np.ndarray
    Bbar: np.ndarray
    delta: np.ndarray | None = None

    @property
    def selective(self) -> bool:
        return self.Abar.ndim == 3

    @classmethod
    def from_continuous(cls, A, B, delta) -> "DiscreteSsm":
        Abar, Bbar = discretize(A, B, delta)
        return cls(Abar, Bbar, np.asarray(delta))


def _as_2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a.reshape((1,) * (2 - a.ndim) + a.shape) if a.ndim < 2 else a


def _per_position(dssm: DiscreteSsm, C, L: int, D: int):
    """Broadcast views of ``Abar``, ``Bbar``, ``C`` with shape ``(L, D, N)``."""
    Abar, Bbar, C = np.asarray(dssm.Abar), np.asarray(dssm.Bbar), np.asarray(C)
    if dssm.selective:
        N = Abar.shape[-1]
        C = np.broadcast_to(C, (L, N))[:, None, :]
    else:
        Abar, Bbar = _as_2d(Abar)[None], _as_2d(Bbar)[None]
        C = _as_2d(C)[None]
    N = max(Abar.shape[-1], Bbar.shape[-1], C.shape[-1])
    shape = (L, D, N)
    return tuple(np.broadcast_to(v, shape) for v in (Abar, Bbar, C))


def scan_recurrent(dssm: DiscreteSsm, C, x) -> np.ndarray:
    """Sequential recurrence ``h_t = Abar_t h_{t-1} + Bbar_t x_t``, ``y_t = C_t . h_t``.

    ``x`` has shape ``(L, D)``. ``C`` is ``(N,)`` or ``(D, N)`` for a fixed
    readout, or ``(L, N)`` when ``dssm`` is selective. ``h_{-1} = 0``.
    """
    x = np.asarray(x)
    L, D = x.shape
    a, b, c = _per_position(dssm, C, L, D)
    dtype = np.result_type(a, b, c, x)
    h = np.zeros(a.shape[1:], dtype=dtype)
    y = np.empty((L, D), dtype=dtype)
    for t in range(L):
        h = a[t] * h + b[t] * x[t][:, None]
        y[t] = (h * c[t]).sum(axis=-1)
    return y


def scan_chunked(dssm: DiscreteSsm, C, x, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Same result as :func:`scan_recurrent`, evaluated ``chunk`` positions at a time.

    Inside a chunk the inputs are premultiplied and the state trajectory is
    materialized in one buffer; only the state is carried between chunks.
    """
    x = np.asarray(x)
    L, D = x.shape
    a, b, c = _per_position(dssm, C, L, D)
    dtype = np.result_type(a, b, c, x)
    h = np.zeros(a.shape[1:], dtype=dtype)
    y = np.empty((L, D), dtype=dtype)
    for c0 in range(0, L, chunk):
        c1 = min(L, c0 + chunk)
        bx = b[c0:c1] * x[c0:c1, :, None]
        hs = np.empty((c1 - c0,) + h.shape, dtype=dtype)
        for t in range(c1 - c0):
            h = a[c0 + t] * h + bx[t]
            hs[t] = h
        y[c0:c1] = (hs * c[c0:c1]).sum(axis=-1)
    return y


def kernel_lti(Abar, Bbar, C, L: int) -> np.ndarray:
    """Convolution kernel ``K[t] = sum_n C_n Abar_n^t Bbar_n`` for ``t < L``.

    Scalar / ``(N,)`` inputs give shape ``(L,)``; ``(D, N)`` inputs give ``(L, D)``.
    """
    if isinstance(Abar, DiscreteSsm):
        raise TypeError("pass Abar, Bbar arrays, not a DiscreteSsm")
    Abar, Bbar, C = np.asarray(Abar), np.asarray(Bbar), np.asarray(C)
    if Abar.ndim == 3 or Bbar.ndim == 3:
        raise ValueError("convolutional form requires LTI (position-invariant) parameters")
    scalar = Abar.ndim <= 1 and Bbar.ndim <= 1 and C.ndim <= 1
    Abar, Bbar = _as_2d(Abar), _as_2d(Bbar)
    Abar, Bbar, C = np.broadcast_arrays(Abar, Bbar, C)
    dtype = np.result_type(Abar, Bbar, C)
    K = np.empty((L, Abar.shape[0]), dtype=dtype)
    power = np.ones_like(Abar, dtype=dtype)
    CB = C * Bbar
    for t in range(L):
        K[t] = (CB * power).sum(axis=-1)
        power = power * Abar
    return K[:, 0] if scalar else K


def conv_lti(dssm: DiscreteSsm, C, x) -> np.ndarray:
    """Convolutional evaluation of an LTI SSM: ``y = x * K`` per channel via FFT."""
    if dssm.selective:
        raise ValueError("convolutional form requires LTI (position-invariant) parameters")
    x = np.asarray(x)
    L, D = x.shape
    a, b, c = _per_position(dssm, C, 1, D)
    K = kernel_lti(a[0], b[0], c[0], L)
    return numeric.rfft_conv(x, K, axis=0)


# ---------------------------------------------------------------- selective scan


def _lmajor(x: np.ndarray) -> np.ndarray:
    """``(B, L, ...)`` -> contiguous ``(L, B, ...)`` so each scan step reads one block."""
    return np.ascontiguousarray(np.swapaxes(x, 0, 1))


def _scan_forward(u, delta, A, Bm, Cm):
    """Forward scan in sequence-major layout; returns ``y`` as ``(B, L, D)`` plus the cache."""
    u, delta, Bm, Cm = _lmajor(u), _lmajor(delta), _lmajor(Bm), _lmajor(Cm)
    d4 = delta[..., None]
    a = d4 * A
    g = _zoh_gain(a, d4, A)
    np.exp(a, out=a)
    # H starts as the input drive g*B*u and is overwritten by the states
    H = g * Bm[:, :, None, :]
    H *= u[..., None]
    tmp = np.empty_like(H[0])
    for t in range(1, u.shape[0]):
        np.multiply(a[t], H[t - 1], out=tmp)
        H[t] += tmp
    y = np.matmul(H, Cm[..., None])[..., 0]
    return np.swapaxes(y, 0, 1), (u, delta, Bm, Cm, H, a, g)


def _scan_backward(gy, A, cache, chunk):
    """Reverse recurrence for the state cotangent, then per-chunk contractions."""
    u, delta, Bm, Cm, H, a, g = cache
    gy = _lmajor(gy)
    L = u.shape[0]
    gC = np.matmul(gy[:, :, None, :], H)[:, :, 0, :]
    G = gy[..., None] * Cm[:, :, None, :]
    tmp = np.empty_like(G[0])
    for t in range(L - 2, -1, -1):
        np.multiply(a[t + 1], G[t + 1], out=tmp)
        G[t] += tmp
    gu = np.empty_like(u)
    gdelta = np.empty_like(delta)
    gB = np.empty_like(Bm)
    gA_abar = np.zeros_like(A)
    gA_gain = np.zeros_like(A)
    tiny = np.min(delta) * np.min(np.abs(A)) < ZOH_LIMIT
    for c0 in range(0, L, chunk):
        c1 = min(L, c0 + chunk)
        Gc, ac, gc, dc, uc, Bc = G[c0:c1], a[c0:c1], g[c0:c1], delta[c0:c1], u[c0:c1], Bm[c0:c1]
        P = Gc * ac                     # cotangent through Abar (d Abar/d dt = A a, d Abar/d A = dt a)
        gbar = Gc * gc
        gu[c0:c1] = np.matmul(gbar, Bc[..., None])[..., 0]
        gB[c0:c1] = np.matmul(uc[:, :, None, :], gbar)[:, :, 0, :]
        gdelta[c0:c1] = uc * np.matmul(P, Bc[..., None])[..., 0]   # d g/d dt = a
        Q = np.empty_like(P)
        np.multiply(P[1:], H[c0:c1 - 1], out=Q[1:])
        if c0 > 0:
            np.multiply(P[0], H[c0 - 1], out=Q[0])
        else:
            Q[0] = 0
        gdelta[c0:c1] += np.einsum("lbdn,dn->lbd", Q, A)
        gA_abar += np.einsum("lbd,lbdn->dn", dc, Q)
        # d g/d A = (dt a - g)/A, the 1/A applied after the reduction
        R = dc[..., None] * P
        R -= gbar
        R *= Bc[:, :, None, :]
        if tiny:
            small = np.abs(dc[..., None] * A) < ZOH_LIMIT
            R[small] = 0
            limit = np.where(small, 0.5 * Gc * dc[..., None] ** 2 * Bc[:, :, None, :], 0)
            gA_abar += np.einsum("lbd,lbdn->dn", uc, limit)
        gA_gain += np.einsum("lbd,lbdn->dn", uc, R)
    back = lambda x: np.swapaxes(x, 0, 1)  # noqa: E731
    return back(gu), back(gdelta), gA_abar + gA_gain / A, back(gB), back(gC)


def selective_scan_op(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor,
                      chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Fused time-varying diagonal SSM scan with a hand-written backward pass.

    Shapes: ``u``, ``delta``: ``(B, L, D)``; ``A``: ``(D, N)``;
    ``Bm``, ``Cm``: ``(B, L, N)``. Returns ``y`` of shape ``(B, L, D)``.
    """
    u, delta, A, Bm, Cm = (as_tensor(t) for t in (u, delta, A, Bm, Cm))
    if u.ndim != 3 or delta.shape != u.shape:
        raise numeric.DimensionError(f"selective scan: u {u.shape} / delta {delta.shape} must be equal (B, L, D)")
    if A.shape[0] != u.shape[2] or Bm.shape != u.shape[:2] + (A.shape[1],) or Cm.shape != Bm.shape:
        raise numeric.DimensionError(
            f"selective scan: inconsistent A {A.shape}, B {Bm.shape}, C {Cm.shape} for u {u.shape}")
    y, cache = _scan_forward(u.data, delta.data, A.data, Bm.data, Cm.data)

    def backward(gy):
        return _scan_backward(gy, A.data, cache, chunk)

    return make_result("selective_scan", (u, delta, A, Bm, Cm), y, backward)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams:
    """Selective SSM parameters for ``D`` channels with state size ``N``.

    ``A = -exp(A_log)`` keeps the diagonal strictly negative. ``B`` and ``C``
    are linear maps ``D -> N`` of the input; the step size is
    ``softplus(dt_bias + broadcast_D(Linear_1(x)))``.
    """

    def __init__(self, A_log, B_proj, C_proj, dt_proj, dt_bias):
        self.A_log = A_log
        self.B_proj = B_proj
        self.C_proj = C_proj
        self.dt_proj = dt_proj
        self.dt_bias = dt_bias

    @classmethod
    def init(cls, store: ParamStore, name: str, d_inner: int, d_state: int, rng: np.random.Generator,
             dt_min: float = 1e-3, dt_max: float = 0.1) -> "SsmParams":
        A = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
        return cls(
            store.add(f"{name}.A_log", np.log(A)),
            Linear(store, f"{name}.B_proj", d_inner, d_state, rng),
            Linear(store, f"{name}.C_proj", d_inner, d_state, rng),
            Linear(store, f"{name}.dt_proj", d_inner, 1, rng),
            store.add(f"{name}.dt_bias", inverse_softplus(dt)),
        )

    @classmethod
    def from_arrays(cls, A, W_B, b_B, W_C, b_C, w_dt, b_dt, dt_bias, dtype=None) -> "SsmParams":
        """Constant (non-trainable) parameters, mainly for verification."""
        A = np.asarray(A, dtype=np.float64)
        if np.any(A >= 0):
            raise ValueError("SSM A entries must be strictly negative")

        class _Fixed:
            def __init__(self, w, b):
                self.weight = Tensor(np.asarray(w), dtype=dtype)
                self.bias = Tensor(np.asarray(b), dtype=dtype)

            def __call__(self, x):
                return ops.linear(x, self.weight, self.bias)

        return cls(Tensor(np.log(-A), dtype=dtype), _Fixed(W_B, b_B), _Fixed(W_C, b_C),
                   _Fixed(np.reshape(w_dt, (-1, 1)), np.reshape(b_dt, (1,))), Tensor(dt_bias, dtype=dtype))

    @property
    def A(self) -> Tensor:
        return ops.mul(ops.exp(self.A_log), -1.0)

    def projections(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent ``(B, C, delta)`` for ``x`` of shape ``(B, L, D)``."""
        Bm = self.B_proj(x)
        Cm = self.C_proj(x)
        s = self.dt_proj(x)  # (B, L, 1), broadcast over channels
        delta = ops.softplus(ops.add(s, self.dt_bias))
        return Bm, Cm, delta


def selective_scan(params: SsmParams, x, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Run the selective SSM over ``x`` of shape ``(B, L, D)`` (or ``(L, D)``)."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    Bm, Cm, delta = params.projections(x)
    y = selective_scan_op(x, delta, params.A, Bm, Cm, chunk=chunk)
    return ops.reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------- Mamba block


class MambaBlock:
    """Three-pathway bidirectional block on ``(B, L, D)`` sequences.

    ``id``: gelu(LayerNorm(X W_id)); ``f``: SSM_f(gelu(X W_f1) W_f2);
    ``b``: the same on the reversed sequence, reversed back. Output is
    ``X + (X_id*X_f + X_id*X_b) W_out``.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, expand: int, d_state: int,
                 rng: np.random.Generator, chunk: int = DEFAULT_CHUNK):
        inner = expand * dim
        self.dim = dim
        self.chunk = chunk
        self.W_id = Linear(store, f"{name}.W_id", dim, inner, rng)
        self.norm = LayerNorm(store, f"{name}.norm", inner)
        self.W_f1 = Linear(store, f"{name}.W_f1", dim, inner, rng)
        self.W_f2 = Linear(store, f"{name}.W_f2", inner, inner, rng)
        self.W_b1 = Linear(store, f"{name}.W_b1", dim, inner, rng)
        self.W_b2 = Linear(store, f"{name}.W_b2", inner, inner, rng)
        self.ssm_f = SsmParams.init(store, f"{name}.ssm_f", inner, d_state, rng)
        self.ssm_b = SsmParams.init(store, f"{name}.ssm_b", inner, d_state, rng)
        self.W_out = Linear(store, f"{name}.W_out", inner, dim, rng)

    def pathways(self, X: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        X_id = ops.gelu(self.norm(self.W_id(X)))
        X_f = selective_scan(self.ssm_f, self.W_f2(ops.gelu(self.W_f1(X))), self.chunk)
        Xr = ops.flip(X, axis=1)
        X_b = ops.flip(selective_scan(self.ssm_b, self.W_b2(ops.gelu(self.W_b1(Xr))), self.chunk), axis=1)
        return X_id, X_f, X_b

    def __call__(self, X) -> Tensor:
        X = as_tensor(X)
        if X.ndim != 3 or X.shape[-1] != self.dim:
            raise numeric.DimensionError(f"Mamba block expects (B, L, {self.dim}), got {X.shape}")
        X_id, X_f, X_b = self.pathways(X)
        gated = ops.add(ops.hadamard(X_id, X_f), ops.hadamard(X_id, X_b))
        return ops.add(X, self.W_out(gated))


def mamba_block(X, block: MambaBlock) -> Tensor:
    return block(X)
