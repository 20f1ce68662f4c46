"""Timing harness for the LTI evaluation routes of the SSM."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import numeric
from .ssm import DiscreteSsm, conv_lti, kernel_lti, scan_chunked, scan_recurrent

MODES = ("recurrent", "chunked", "fft", "direct")


@dataclass
class BenchRow:
    L: int
    N: int
    D: int
    mode: str
    wall_ns: int
    max_abs_err_vs_oracle: float


def random_lti(rng: np.random.Generator, D: int, N: int):
    """A stable random LTI system ``(dssm, C)`` in float64."""
    A = -rng.uniform(0.1, 2.0, size=(D, N))
    B = rng.normal(size=(D, N))
    C = rng.normal(size=(D, N))
    delta = rng.uniform(0.01, 0.5, size=(D, 1))
    return DiscreteSsm.from_continuous(A, B, delta), C


def _direct(dssm: DiscreteSsm, C, x) -> np.ndarray:
    K = kernel_lti(dssm.Abar, dssm.Bbar, C, x.shape[0])
    return numeric.direct_causal_conv(x, K, axis=0)


_RUNNERS = {
    "recurrent": lambda d, C, x: scan_recurrent(d, C, x),
    "chunked": lambda d, C, x: scan_chunked(d, C, x),
    "fft": lambda d, C, x: conv_lti(d, C, x),
    "direct": _direct,
}


def run_bench(lengths, states=(16,), channels=(4,), modes=MODES, repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    """Best-of-``repeats`` wall time per (L, N, D, mode); errors against the direct convolution."""
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ValueError(f"unknown bench modes {sorted(unknown)}; choose from {MODES}")
    rows = []
    rng = np.random.default_rng(seed)
    for L in lengths:
        for N in states:
            for D in channels:
                dssm, C = random_lti(rng, D, N)
                x = rng.normal(size=(L, D))
                oracle = _direct(dssm, C, x)
                for mode in modes:
                    best = None
                    for _ in range(repeats):
                        t0 = time.perf_counter_ns()
                        y = _RUNNERS[mode](dssm, C, x)
                        dt = time.perf_counter_ns() - t0
                        best = dt if best is None else min(best, dt)
                    rows.append(BenchRow(L, N, D, mode, best, float(np.max(np.abs(y - oracle)))))
    return rows


def to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(BenchRow)])
    for r in rows:
        w.writerow(astuple(r))
    return buf.getvalue()
