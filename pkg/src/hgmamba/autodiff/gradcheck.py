"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradcheckResult:
    name: str
    checked: int
    failures: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return float(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    n_coords: int = 100,
    h: float = 1e-5,
    rtol: float = 1e-4,
    seed: int = 0,
    name: str = "fn",
    noise_factor: float = 4.0,
) -> GradcheckResult:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    ``fn`` must be deterministic and read the current ``.data`` of ``tensors``.
    ``n_coords`` coordinates are drawn uniformly over all entries of all
    tensors (without replacement when there are fewer entries than that, in
    which case every entry is checked).

    A coordinate whose first estimate misses the tolerance is re-estimated at
    ``h/10``: a piecewise-linear activation crossing its kink inside the
    stencil corrupts the estimate at one step size but not both.

    Central differences cannot resolve derivatives below the rounding noise
    of ``fn``, roughly ``eps * |fn()| / h``. Gradients smaller than
    ``noise_factor`` times that level are compared against it instead of
    against their own magnitude.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    f0 = float(loss.data)
    resolution = noise_factor * np.finfo(loss.dtype).eps * max(abs(f0), 1.0) / h
    floor = max(1e-8, resolution / rtol)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    sizes = np.array([t.data.size for t in tensors])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def central(t: Tensor, k: int, step: float) -> float:
        flat = t.data.reshape(-1)
        orig = flat[k]
        flat[k] = orig + step
        fp = float(fn().data)
        flat[k] = orig - step
        fm = float(fn().data)
        flat[k] = orig
        return (fp - fm) / (2 * step)

    failures = 0
    worst = 0.0
    for fid in flat_ids:
        ti = int(np.searchsorted(offsets, fid, side="right") - 1)
        k = int(fid - offsets[ti])
        t = tensors[ti]
        a = float(analytic[ti].reshape(-1)[k])
        err = relative_error(a, central(t, k, h), floor)
        if err > rtol:
            err = min(err, relative_error(a, central(t, k, h / 10), 10 * floor))
        worst = max(worst, err)
        if err > rtol:
            failures += 1
    for t in tensors:
        t.grad = None
    return GradcheckResult(name, len(flat_ids), failures, worst)
