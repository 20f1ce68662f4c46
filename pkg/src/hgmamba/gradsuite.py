"""Finite-difference gradient checks for every differentiable op and the composed model.

Every case builds its own float64 inputs from a seed, so the suite is a
pure function of ``(seed, n_coords)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numeric
from .autodiff import GradcheckResult, Tensor, gradcheck, ops
from .hypergcn import HyperGcnStream, hypergraph_kernel
from .layers import Linear
from .model import HGMamba, ModelConfig, adaptive_fusion, loss
from .skeleton import H36M, SkeletonSpec
from .ssm import MambaBlock, selective_scan_op
from .autodiff.optim import ParamStore


def _t(rng, *shape, low=None, high=None):
    data = rng.uniform(low, high, size=shape) if low is not None else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def _proj(rng, y: Tensor) -> Tensor:
    """Random linear functional, so every output entry contributes."""
    return ops.sum(ops.mul(y, Tensor(rng.normal(size=y.shape))))


def toy_skeleton() -> SkeletonSpec:
    """Five joints: a two-joint trunk and one joint per limb."""
    return SkeletonSpec(
        joint_names=("hip", "head", "right_hand", "left_hand", "foot"),
        parents=(-1, 0, 0, 0, 0),
        body_edges=((0, 1), (2, 3, 4)),
        part_edges=((0,), (1,), (2, 3), (4,)),
        flip_pairs=((2, 3),),
        name="toy5",
    )


def op_cases(seed: int) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    """Name -> builder returning ``(fn, tensors)`` for :func:`gradcheck`."""

    def case(build):
        def make():
            rng = np.random.default_rng(seed)
            return build(rng)
        return make

    def elementwise(op, low=None, high=None):
        def build(rng):
            x = _t(rng, 3, 4, low=low, high=high)
            w = Tensor(rng.normal(size=(3, 4)))
            return (lambda: ops.sum(ops.mul(op(x), w))), [x]
        return build

    def binary(op, low=None, high=None):
        def build(rng):
            a, b = _t(rng, 3, 4), _t(rng, 4, low=low, high=high)
            w = Tensor(rng.normal(size=(3, 4)))
            return (lambda: ops.sum(ops.mul(op(a, b), w))), [a, b]
        return build

    def matmul(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
        return (lambda: _proj(np.random.default_rng(1), ops.matmul(a, b))), [a, b]

    def linear(rng):
        x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        return (lambda: _proj(np.random.default_rng(1), ops.linear(x, w, b))), [x, w, b]

    def shape_op(f, shape=(2, 3, 4)):
        def build(rng):
            x = _t(rng, *shape)
            return (lambda: _proj(np.random.default_rng(1), f(x))), [x]
        return build

    perm = np.random.default_rng(seed).permutation(4)

    def concat(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 2)
        return (lambda: _proj(np.random.default_rng(1), ops.concat([a, b], axis=-1))), [a, b]

    def layernorm(rng):
        x, g, b = _t(rng, 3, 5), _t(rng, 5), _t(rng, 5)
        return (lambda: _proj(np.random.default_rng(1), ops.layernorm(x, g, b))), [x, g, b]

    def batchnorm(training):
        def build(rng):
            x, g, b = _t(rng, 6, 4), _t(rng, 4), _t(rng, 4)
            stats = numeric.BatchNormStats(4, dtype=np.float64)
            stats.mean, stats.var = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
            return (lambda: _proj(np.random.default_rng(1), ops.batchnorm(x, stats, g, b, training))), [x, g, b]
        return build

    def norm(rng):
        x = _t(rng, 3, 4, 3)
        return (lambda: _proj(np.random.default_rng(1), ops.norm(x, axis=-1))), [x]

    def scan(rng):
        B, L, D, N = 2, 9, 3, 4
        u = _t(rng, B, L, D)
        delta = _t(rng, B, L, D, low=0.01, high=0.5)
        A = Tensor(-rng.uniform(0.5, 3.0, size=(D, N)), requires_grad=True)
        Bm, Cm = _t(rng, B, L, N), _t(rng, B, L, N)
        return (lambda: _proj(np.random.default_rng(1), selective_scan_op(u, delta, A, Bm, Cm, chunk=4))), \
            [u, delta, A, Bm, Cm]

    def hyper_kernel(rng):
        M = _t(rng, 5, low=0.5, high=1.5)
        H = H36M.incidence("body")
        return (lambda: _proj(np.random.default_rng(1), hypergraph_kernel(H, M))), [M]

    def mamba(rng):
        store = ParamStore(np.float64)
        blk = MambaBlock(store, "m", 8, 2, 4, rng, chunk=4)
        X = _t(rng, 2, 7, 8)
        return (lambda: _proj(np.random.default_rng(1), blk(X))), [X] + list(store.params.values())

    def hgcn(training):
        def build(rng):
            store = ParamStore(np.float64)
            stream = HyperGcnStream(store, "h", H36M, 6, rng)
            X = _t(rng, 2, 4, 17, 6)
            return (lambda: _proj(np.random.default_rng(1), stream(X, training))), [X] + list(store.params.values())
        return build

    def fusion(rng):
        store = ParamStore(np.float64)
        lin = Linear(store, "f", 8, 2, rng)
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
        return (lambda: _proj(np.random.default_rng(1), adaptive_fusion(a, b, lin)[0])), [a, b] + list(store)

    def loss_case(rng):
        p = _t(rng, 2, 4, 5, 3)
        y = rng.normal(size=(2, 4, 5, 3))
        return (lambda: loss(p, y, 20.0)), [p]

    return {
        "add": case(binary(ops.add)),
        "sub": case(binary(ops.sub)),
        "mul": case(binary(ops.mul)),
        "div": case(binary(ops.div, low=0.5, high=2.0)),
        "exp": case(elementwise(ops.exp)),
        "tanh": case(elementwise(ops.tanh)),
        "sqrt": case(elementwise(ops.sqrt, low=0.5, high=2.0)),
        "relu": case(elementwise(ops.relu)),
        "gelu": case(elementwise(ops.gelu)),
        "softplus": case(elementwise(ops.softplus)),
        "matmul": case(matmul),
        "linear": case(linear),
        "reshape": case(shape_op(lambda x: ops.reshape(x, (6, 4)))),
        "transpose": case(shape_op(lambda x: ops.transpose(x, (2, 0, 1)))),
        "index": case(shape_op(lambda x: ops.index(x, (slice(None), slice(1, 3))))),
        "flip": case(shape_op(lambda x: ops.flip(x, axis=1))),
        "gather": case(shape_op(lambda x: ops.gather(x, 2, np.broadcast_to(perm, (2, 3, 4))))),
        "concat": case(concat),
        "sum": case(shape_op(lambda x: ops.sum(x, axis=1))),
        "mean": case(shape_op(lambda x: ops.mean(x, axis=(0, 2)))),
        "softmax": case(shape_op(lambda x: ops.softmax(x, axis=-1))),
        "layernorm": case(layernorm),
        "batchnorm_train": case(batchnorm(True)),
        "batchnorm_eval": case(batchnorm(False)),
        "norm": case(norm),
        "selective_scan": case(scan),
        "hypergraph_kernel": case(hyper_kernel),
        "mamba_block": case(mamba),
        "hypergcn_stream_train": case(hgcn(True)),
        "hypergcn_stream_eval": case(hgcn(False)),
        "adaptive_fusion": case(fusion),
        "loss": case(loss_case),
    }


def model_case(seed: int, config: ModelConfig, skeleton: SkeletonSpec, training: bool, batch: int = 2):
    """Full-model loss as a function of every parameter.

    Targets are drawn at the model's output scale so the loss stays in the
    regime a training run sees.
    """
    rng = np.random.default_rng(seed)
    model = HGMamba(config, skeleton, dtype=np.float64)
    x = rng.normal(size=(batch, config.frames, skeleton.num_joints, 2)) * 0.3
    y = rng.normal(size=(batch, config.frames, skeleton.num_joints, 3)) * 0.5 * config.out_scale
    fn = lambda: loss(model.forward(x, training=training, step=0), y, config.velocity_weight)  # noqa: E731
    return fn, list(model.store.params.values())


TINY_GRAD_CONFIG = dict(depth=2, dim=16, frames=4)


def run_suite(seed: int = 0, n_coords: int = 100, include_model: bool = True,
              model_overrides: dict | None = None) -> list[GradcheckResult]:
    results = []
    with numeric.precision("f64"):
        for name, make in op_cases(seed).items():
            fn, tensors = make()
            results.append(gradcheck(fn, tensors, n_coords=n_coords, seed=seed, name=name))
        if include_model:
            cfg = ModelConfig(**{**TINY_GRAD_CONFIG, "seed": seed, **(model_overrides or {})})
            for training in (False, True):
                fn, params = model_case(seed, cfg, H36M, training)
                mode = "train" if training else "eval"
                results.append(gradcheck(fn, params, n_coords=n_coords, seed=seed, name=f"model_tiny_{mode}"))
            toy = ModelConfig(depth=2, dim=8, frames=4, joints=5, seed=seed)
            fn, params = model_case(seed, toy, toy_skeleton(), True)
            results.append(gradcheck(fn, params, n_coords=n_coords, seed=seed, name="model_j5_d8_train"))
    return results


def format_table(results: list[GradcheckResult]) -> str:
    lines = [f"{'case':<24} {'coords':>6} {'fail':>5} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.checked:>6} {r.failures:>5} {r.max_rel_err:>12.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
