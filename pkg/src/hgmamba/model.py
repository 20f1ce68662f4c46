"""HGMamba: 2D-to-3D pose lifting with parallel Mamba and HyperGCN streams."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import numeric
from .autodiff import ParamStore, Tensor, as_tensor, ops
from .hypergcn import HyperGcnStream
from .layers import FeedForward, Linear
from .skeleton import H36M, SkeletonSpec
from .ssm import DEFAULT_CHUNK, MambaBlock

SCAN_MODES = ("st", "ts")

# Reported parameter counts of the three published variants.
TABLE1_PARAMS = {"xs": 2.8e6, "s": 6.1e6, "b": 14.2e6}


@dataclass
class ModelConfig:
    depth: int = 2                  # number of HGM blocks (N)
    dim: int = 32                   # base channels (D)
    frames: int = 9                 # input frames (T)
    joints: int = 17
    expand: int = 2                 # Mamba expansion factor (n)
    d_state: int = 16               # SSM state size
    head_dim: int = 512             # regression-head hidden width (D')
    shuffle_p: float = 0.5          # P_N; layer l shuffles with probability l/N * P_N
    velocity_weight: float = 20.0   # lambda
    scan_modes: tuple[str, ...] = SCAN_MODES
    mlp_ratio: int = 4              # per-stream feed-forward width; 0 disables
    knn_k: int = 2
    out_scale: float = 1000.0       # head output units -> millimetres
    chunk: int = DEFAULT_CHUNK
    seed: int = 0

    def __post_init__(self):
        self.scan_modes = tuple(self.scan_modes)
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1 (got {self.depth})")
        if self.dim < 8 or self.dim % 2:
            problems.append(f"dim must be even and >= 8 (got {self.dim})")
        if self.frames < 1:
            problems.append(f"frames must be >= 1 (got {self.frames})")
        if not 0.0 <= self.shuffle_p <= 1.0:
            problems.append(f"shuffle_p must lie in [0, 1] (got {self.shuffle_p})")
        if self.velocity_weight < 0:
            problems.append(f"velocity_weight must be >= 0 (got {self.velocity_weight})")
        if not self.scan_modes or any(m not in SCAN_MODES for m in self.scan_modes):
            problems.append(f"scan_modes must be a non-empty subset of {SCAN_MODES} (got {self.scan_modes})")
        if self.mlp_ratio < 0:
            problems.append(f"mlp_ratio must be >= 0 (got {self.mlp_ratio})")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scan_modes"] = list(self.scan_modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PRESETS = {
    "tiny": dict(depth=2, dim=32, frames=9),
    "xs": dict(depth=12, dim=64, frames=27),
    "s": dict(depth=26, dim=64, frames=81),
    "b": dict(depth=16, dim=128, frames=243),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def shuffle_probability(layer: int, depth: int, shuffle_p: float) -> float:
    """Layer-wise shuffle probability ``layer/depth * shuffle_p`` (``layer`` is 1-based)."""
    if not 1 <= layer <= depth:
        raise ValueError(f"layer {layer} outside 1..{depth}")
    return layer / depth * shuffle_p


def _scan_sequence(block, X: Tensor, scan_mode: str) -> Tensor:
    Bsz, T, J, D = X.shape
    if scan_mode == "st":
        y = block(ops.reshape(X, (Bsz, T * J, D)))
        return ops.reshape(y, (Bsz, T, J, D))
    if scan_mode == "ts":
        y = block(ops.reshape(ops.transpose(X, (0, 2, 1, 3)), (Bsz, J * T, D)))
        return ops.transpose(ops.reshape(y, (Bsz, J, T, D)), (0, 2, 1, 3))
    raise ValueError(f"unknown scan mode {scan_mode!r}")


def shuffled_mamba_stream(X, block, scan_mode: str, p: float, training: bool,
                          rng: np.random.Generator | None) -> Tensor:
    """Run ``block`` over the flattened joint/frame sequence, optionally with
    shuffled joint order.

    In training mode, with probability ``p`` every batch element gets a fresh
    uniform joint permutation; the block runs on the permuted sequence and
    the permutation is undone afterwards. ``block`` maps ``(B, L, D)`` to
    ``(B, L, D)``.
    """
    X = as_tensor(X)
    if training and rng is not None and rng.random() < p:
        Bsz, _, J, _ = X.shape
        perm = np.stack([rng.permutation(J) for _ in range(Bsz)])
        restore = numeric.inverse_permutation(perm, axis=-1)
        shuffled = ops.gather(X, 2, perm[:, None, :, None])
        out = _scan_sequence(block, shuffled, scan_mode)
        return ops.gather(out, 2, restore[:, None, :, None])
    return _scan_sequence(block, X, scan_mode)


def adaptive_fusion(X_m: Tensor, X_hg: Tensor, fusion: Linear) -> tuple[Tensor, Tensor]:
    """Softmax-gated convex combination of the two streams; returns ``(X, alpha)``."""
    alpha = ops.softmax(fusion(ops.concat([X_m, X_hg], axis=-1)), axis=-1)
    a_m = ops.index(alpha, (..., slice(0, 1)))
    a_hg = ops.index(alpha, (..., slice(1, 2)))
    return ops.add(ops.mul(a_m, X_m), ops.mul(a_hg, X_hg)), alpha


class HgmBlock:
    def __init__(self, store: ParamStore, name: str, layer: int, config: ModelConfig,
                 skeleton: SkeletonSpec, rng: np.random.Generator):
        D = config.dim
        self.layer = layer
        self.p = shuffle_probability(layer, config.depth, config.shuffle_p)
        self.mamba = {mode: MambaBlock(store, f"{name}.mamba_{mode}", D, config.expand, config.d_state,
                                       rng, chunk=config.chunk)
                      for mode in config.scan_modes}
        self.hgcn = HyperGcnStream(store, f"{name}.hgcn", skeleton, D, rng, k=config.knn_k)
        self.mamba_mlp = self.hgcn_mlp = None
        if config.mlp_ratio:
            self.mamba_mlp = FeedForward(store, f"{name}.mamba_mlp", D, config.mlp_ratio, rng)
            self.hgcn_mlp = FeedForward(store, f"{name}.hgcn_mlp", D, config.mlp_ratio, rng)
        self.fusion = Linear(store, f"{name}.fusion", 2 * D, 2, rng)

    def mamba_stream(self, X: Tensor, training: bool, rng) -> Tensor:
        outs = [shuffled_mamba_stream(X, blk, mode, self.p, training, rng) for mode, blk in self.mamba.items()]
        out = outs[0]
        for o in outs[1:]:
            out = ops.add(out, o)
        if len(outs) > 1:
            out = ops.mul(out, 1.0 / len(outs))
        return self.mamba_mlp(out) if self.mamba_mlp else out

    def hgcn_stream(self, X: Tensor, training: bool) -> Tensor:
        out = self.hgcn(X, training)
        return self.hgcn_mlp(out) if self.hgcn_mlp else out

    def __call__(self, X, training: bool = False, rng=None) -> Tensor:
        X = as_tensor(X)
        X_m = self.mamba_stream(X, training, rng)
        X_hg = self.hgcn_stream(X, training)
        out, _ = adaptive_fusion(X_m, X_hg, self.fusion)
        return out


class HGMamba:
    def __init__(self, config: ModelConfig, skeleton: SkeletonSpec = H36M, dtype=None):
        if skeleton.num_joints != config.joints:
            raise ValueError(f"skeleton has {skeleton.num_joints} joints, config expects {config.joints}")
        self.config = config
        self.skeleton = skeleton
        rng = np.random.default_rng(config.seed)
        self.store = store = ParamStore(dtype)
        D = config.dim
        self.embed_proj = Linear(store, "embed", 2, D, rng)
        self.pos_embed = store.add("pos_embed", rng.normal(0.0, 0.02, size=(config.frames, config.joints, D)))
        self.blocks = [HgmBlock(store, f"blocks.{i}", i + 1, config, skeleton, rng) for i in range(config.depth)]
        self.head_hidden = Linear(store, "head.hidden", D, config.head_dim, rng)
        self.head_out = Linear(store, "head.out", config.head_dim, 3, rng)

    @property
    def dtype(self):
        return self.store.dtype

    def embed(self, P2d) -> Tensor:
        P2d = as_tensor(np.asarray(P2d.data if isinstance(P2d, Tensor) else P2d, dtype=self.dtype))
        T, J = P2d.shape[-3], P2d.shape[-2]
        if P2d.shape[-1] != 2 or J != self.config.joints:
            raise numeric.DimensionError(f"expected (..., T, {self.config.joints}, 2) input, got {P2d.shape}")
        if T > self.config.frames:
            raise numeric.DimensionError(f"{T} frames exceed the configured {self.config.frames}")
        pos = self.pos_embed if T == self.config.frames else ops.index(self.pos_embed, slice(0, T))
        if not np.all(np.isfinite(P2d.data)):
            raise numeric.NumericError("non-finite values in 2D input")
        return ops.add(self.embed_proj(P2d), pos)

    def layer_rng(self, step: int, layer: int, shard: int = 0) -> np.random.Generator:
        """Shuffle stream for one (step, layer, shard); independent of execution order."""
        return np.random.default_rng([self.config.seed, step, layer, shard])

    def forward(self, P2d, training: bool = False, rng: np.random.Generator | None = None,
                step: int | None = None, shard: int = 0) -> Tensor:
        """``(B, T, J, 2)`` normalized 2D poses -> ``(B, T, J, 3)`` millimetres.

        Training-mode shuffles draw from ``rng`` if given, otherwise from the
        per-layer stream of ``step``; with neither, no shuffling happens.
        """
        X = self.embed(P2d)
        if X.ndim != 4:
            raise numeric.DimensionError(f"forward expects a batch (B, T, J, 2), got {X.shape[:-1] + (2,)}")
        for i, block in enumerate(self.blocks):
            block_rng = rng
            if block_rng is None and training and step is not None:
                block_rng = self.layer_rng(step, block.layer, shard)
            try:
                X = block(X, training, block_rng)
            except numeric.NumericError as exc:
                raise numeric.NumericError(f"non-finite activations in HGM block {i}: {exc}") from exc
            if not np.all(np.isfinite(X.data)):
                raise numeric.NumericError(f"non-finite activations after HGM block {i}")
        out = self.head_out(self.head_hidden(X))
        return ops.mul(out, self.config.out_scale)

    __call__ = forward

    def predict(self, P2d, flip_test: bool = False, batch_size: int = 64) -> np.ndarray:
        """Inference-mode prediction as an ndarray; optional flip averaging."""
        P2d = np.asarray(P2d, dtype=self.dtype)
        outs = []
        for s in range(0, len(P2d), batch_size):
            chunk = P2d[s:s + batch_size]
            y = self.forward(chunk).data
            if flip_test:
                yf = self.forward(horizontal_flip(chunk, self.skeleton)).data
                y = 0.5 * (y + horizontal_flip(yf, self.skeleton))
            outs.append(y)
        return np.concatenate(outs, axis=0)

    def num_parameters(self) -> int:
        return self.store.num_parameters()


def hgm_block(X, block: HgmBlock, training: bool = False, rng=None) -> Tensor:
    return block(X, training, rng)


def position_loss_terms(pred: Tensor, gt) -> tuple[Tensor, Tensor]:
    """Per-sample position and velocity error sums, each of shape ``(B,)``."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise numeric.DimensionError(f"prediction {pred.shape} and target {gt.shape} differ")
    err = ops.sub(Tensor(gt), pred)
    l3d = ops.sum(ops.norm(err, axis=-1), axis=(-2, -1))
    T = pred.shape[-3]
    if T > 1:
        lead = (slice(None),) * (pred.ndim - 3)
        vel = ops.sub(ops.index(err, lead + (slice(1, None),)), ops.index(err, lead + (slice(0, T - 1),)))
        lv = ops.sum(ops.norm(vel, axis=-1), axis=(-2, -1))
    else:
        lv = Tensor(np.zeros(l3d.shape, dtype=pred.dtype))
    return l3d, lv


def loss(pred, gt, velocity_weight: float = 20.0) -> Tensor:
    """Position plus weighted velocity error (Euclidean, unsquared), batch-averaged.

    Accepts ``(T, J, 3)`` or ``(B, T, J, 3)``; sums over frames and joints.
    """
    l3d, lv = position_loss_terms(pred, gt)
    total = ops.add(l3d, ops.mul(lv, float(velocity_weight)))
    return ops.mean(total) if total.ndim else total


def horizontal_flip(P, skeleton: SkeletonSpec = H36M) -> np.ndarray:
    """Mirror poses ``(..., J, C)``: negate x about the root and swap left/right joints."""
    P = np.asarray(P)
    if P.shape[-2] != skeleton.num_joints:
        raise numeric.DimensionError(f"pose has {P.shape[-2]} joints, skeleton has {skeleton.num_joints}")
    paired = set(j for pair in skeleton.flip_pairs for j in pair)
    for j in range(skeleton.num_joints):
        name = skeleton.joint_names[j]
        if j not in paired and (name.startswith("left") or name.startswith("right")):
            raise ValueError(f"lateral joint {name!r} has no flip partner")
    out = P[..., skeleton.flip_permutation(), :].copy()
    root_x = P[..., skeleton.root:skeleton.root + 1, 0]
    out[..., 0] = 2 * root_x - out[..., 0]
    return out


horizontal_flip_augment = horizontal_flip


def parameter_table(model: HGMamba) -> list[tuple[str, int]]:
    """Parameter counts grouped by module (block submodules pooled over depth)."""
    groups: dict[str, int] = {}
    for name, p in model.store.params.items():
        parts = name.split(".")
        key = f"blocks.*.{parts[2]}" if parts[0] == "blocks" else parts[0]
        groups[key] = groups.get(key, 0) + p.data.size
    return list(groups.items())
