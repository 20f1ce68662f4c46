"""Regenerates tests/data/golden.hgpose; run only when the format version changes."""

from pathlib import Path

import numpy as np

from hgmamba import H36M
from hgmamba.data import PoseDataset, save_dataset


def golden_dataset() -> PoseDataset:
    frames = (3, 2)
    p3 = [np.arange(f * 17 * 3, dtype=np.float32).reshape(f, 17, 3) * 0.5 + 100 * i for i, f in enumerate(frames)]
    p2 = [np.linspace(-1, 1, f * 17 * 2, dtype=np.float32).reshape(f, 17, 2) for f in frames]
    return PoseDataset(p3, p2, H36M, "golden", 1, {"purpose": "byte-level format fixture"})


if __name__ == "__main__":
    save_dataset(Path(__file__).parent / "data" / "golden.hgpose", golden_dataset())
