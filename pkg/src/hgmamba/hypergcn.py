"""Graph/hypergraph kernels and the HyperGCN stream.

Features are laid out ``(B, T, J, D)``. Spatial kernels mix the joint axis
only; the temporal kernel mixes the frame axis.
"""

from __future__ import annotations

import numpy as np

from . import numeric
from .autodiff import ParamStore, Tensor, as_tensor, ops
from .layers import BatchNorm, Linear
from .skeleton import SkeletonSpec


class HypergraphError(ValueError):
    pass


class Hypergraph:
    """Vertex/hyperedge incidence ``H`` (``J x E``, entries 0/1)."""

    def __init__(self, H):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2:
            raise HypergraphError(f"incidence matrix must be 2-d, got shape {H.shape}")
        if not np.all((H == 0) | (H == 1)):
            raise HypergraphError("incidence entries must be 0 or 1")
        dv = H.sum(axis=1)
        de = H.sum(axis=0)
        if np.any(dv == 0):
            raise HypergraphError(f"vertices {np.flatnonzero(dv == 0).tolist()} belong to no hyperedge")
        if np.any(de == 0):
            raise HypergraphError(f"hyperedges {np.flatnonzero(de == 0).tolist()} are empty")
        self.H = H
        self.vertex_degree = dv
        self.edge_degree = de

    @property
    def num_vertices(self) -> int:
        return self.H.shape[0]

    @property
    def num_edges(self) -> int:
        return self.H.shape[1]

    def kernel(self, M=None):
        return hypergraph_kernel(self.H, M)


def graph_kernel(adjacency) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``.

    Accepts a single ``(V, V)`` adjacency or a batch ``(..., V, V)``.
    """
    A = np.asarray(adjacency, dtype=np.float64 if not isinstance(adjacency, np.ndarray) else None)
    if A.shape[-1] != A.shape[-2]:
        raise numeric.DimensionError(f"adjacency must be square, got {A.shape}")
    At = A + np.eye(A.shape[-1], dtype=A.dtype)
    d = 1.0 / np.sqrt(At.sum(axis=-1))
    return d[..., :, None] * At * d[..., None, :]


def hypergraph_kernel(H, M=None):
    """``Dv^-1/2 H M De^-1 H^T Dv^-1/2`` for diagonal hyperedge weights ``M``.

    ``M`` may be ``None`` (identity), a length-``E`` vector, an ``E x E``
    diagonal matrix, or a length-``E`` :class:`Tensor` (in which case the
    result is a Tensor differentiable in ``M``).
    """
    hg = H if isinstance(H, Hypergraph) else Hypergraph(H)
    Hm = hg.H
    left = Hm / np.sqrt(hg.vertex_degree)[:, None]            # Dv^-1/2 H
    right = left / hg.edge_degree[None, :]                     # Dv^-1/2 H De^-1
    if isinstance(M, Tensor):
        if M.shape != (hg.num_edges,):
            raise numeric.DimensionError(f"hyperedge weights {M.shape} != ({hg.num_edges},)")
        L = Tensor(left.astype(M.dtype))
        R = Tensor(np.ascontiguousarray(right.T).astype(M.dtype))
        return ops.matmul(ops.mul(L, M), R)
    if M is None:
        m = np.ones(hg.num_edges)
    else:
        M = np.asarray(M, dtype=np.float64)
        m = np.diag(M) if M.ndim == 2 else M
        if m.shape != (hg.num_edges,):
            raise numeric.DimensionError(f"hyperedge weights {M.shape} do not match {hg.num_edges} edges")
    return (left * m) @ right.T


def mix_joints(kernel, X: Tensor) -> Tensor:
    """Apply a ``J x J`` kernel along the joint axis of ``(B, T, J, D)`` features."""
    return ops.matmul(as_tensor(kernel, dtype=X.dtype), X)


class GraphConv:
    """``relu(BatchNorm(K X W))`` with ``K`` supplied per call."""

    def __init__(self, store: ParamStore, name: str, dim: int, rng: np.random.Generator):
        self.linear = Linear(store, f"{name}.W", dim, dim, rng)
        self.norm = BatchNorm(store, f"{name}.bn", dim)

    def __call__(self, mixed: Tensor, training: bool) -> Tensor:
        return ops.relu(self.norm(self.linear(mixed), training))


def spatial_hypergcn(X: Tensor, branches, training: bool) -> Tensor:
    """Sum over ``(kernel, GraphConv)`` branches of ``relu(BN(kernel X W))``."""
    X = as_tensor(X)
    out = None
    for kernel, conv in branches:
        if kernel.shape[-1] != X.shape[2]:
            raise numeric.DimensionError(f"kernel over {kernel.shape[-1]} joints, features have {X.shape[2]}")
        y = conv(mix_joints(kernel, X), training)
        out = y if out is None else ops.add(out, y)
    return out


def temporal_knn_adjacency(X_spatial, k: int = 2) -> np.ndarray:
    """Directed k-nearest-neighbour frame graph from dot-product similarity.

    ``X_spatial`` is ``(B, T, C)``. Row ``t`` marks the ``min(k, T-1)`` other
    frames with the largest ``<x_t, x_s>``; ties go to the lower frame index.
    Self-similarity is excluded (the kernel adds self-loops).
    """
    X = np.asarray(X_spatial.data if isinstance(X_spatial, Tensor) else X_spatial)
    Bsz, T, _ = X.shape
    k = max(0, min(k, T - 1))
    S = np.matmul(X, np.swapaxes(X, 1, 2)).astype(np.float64)
    idx = np.arange(T)
    S[:, idx, idx] = -np.inf
    order = np.argsort(-S, axis=-1, kind="stable")[..., :k]
    A = np.zeros((Bsz, T, T), dtype=X.dtype)
    np.put_along_axis(A, order, 1.0, axis=-1)
    return A


def temporal_gcn(X_spatial: Tensor, A_tp: np.ndarray, conv: GraphConv, training: bool) -> Tensor:
    """``relu(BN(G_tp X W))`` with ``G_tp = graph_kernel(A_tp)`` mixing frames."""
    Bsz, T, J, D = X_spatial.shape
    G = graph_kernel(A_tp).astype(X_spatial.dtype)
    flat = ops.reshape(X_spatial, (Bsz, T, J * D))
    mixed = ops.reshape(ops.matmul(Tensor(G), flat), (Bsz, T, J, D))
    return conv(mixed, training)


class HyperGcnStream:
    """Spatial part/body HyperGCNs summed, then the temporal KNN GCN."""

    def __init__(self, store: ParamStore, name: str, skeleton: SkeletonSpec, dim: int,
                 rng: np.random.Generator, k: int = 2):
        self.k = k
        self.part = Hypergraph(skeleton.incidence("part"))
        self.body = Hypergraph(skeleton.incidence("body"))
        self.M_part = store.add(f"{name}.M_part", np.ones(self.part.num_edges))
        self.M_body = store.add(f"{name}.M_body", np.ones(self.body.num_edges))
        self.conv_part = GraphConv(store, f"{name}.part", dim, rng)
        self.conv_body = GraphConv(store, f"{name}.body", dim, rng)
        self.conv_tp = GraphConv(store, f"{name}.temporal", dim, rng)

    def spatial(self, X: Tensor, training: bool) -> Tensor:
        return spatial_hypergcn(X, [
            (hypergraph_kernel(self.part, self.M_part), self.conv_part),
            (hypergraph_kernel(self.body, self.M_body), self.conv_body),
        ], training)

    def __call__(self, X, training: bool) -> Tensor:
        X = as_tensor(X)
        if X.ndim != 4 or X.shape[2] != self.part.num_vertices:
            raise numeric.DimensionError(
                f"HyperGCN stream expects (B, T, {self.part.num_vertices}, D), got {X.shape}")
        Xs = self.spatial(X, training)
        Bsz, T, J, D = Xs.shape
        A_tp = temporal_knn_adjacency(Xs.data.reshape(Bsz, T, J * D), self.k)
        return temporal_gcn(Xs, A_tp, self.conv_tp, training)


def hypergcn_stream(X, stream: HyperGcnStream, training: bool) -> Tensor:
    return stream(X, training)
