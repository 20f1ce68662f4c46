"""Pose-sequence datasets: synthetic motion, projection, noise, windowing and file I/O.

Units: 3D joints are millimetres in camera coordinates (x right, y down,
z forward); 2D joints are normalized image coordinates in ``[-1, 1]``.

The HGPOSE1 layout (all integers and floats little-endian):

    offset 0   8 bytes   magic  b"HGPOSE1\\0"
    offset 8   u32       format version (1)
    offset 12  u32       header length n in bytes
    offset 16  n bytes   UTF-8 JSON header
    then       f32       2D block, frame-major (frames, J, 2), if present
    then       f32       3D block, frame-major (frames, J, 3), if present

Frames of all sequences are concatenated in order; the header lists each
sequence's frame count.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import H36M, SkeletonSpec

MAGIC = b"HGPOSE1\0"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
FPS = 50.0


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------- containers


@dataclass
class PoseDataset:
    """Paired 3D ground truth and 2D inputs, one array per sequence.

    Either side may be absent (``None``) for inference inputs or outputs.
    """

    poses_3d: list[np.ndarray] | None
    poses_2d: list[np.ndarray] | None
    skeleton: SkeletonSpec = H36M
    split: str = "all"
    stride: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.poses_3d is None and self.poses_2d is None:
            raise ValueError("dataset needs 2D or 3D poses")
        J = self.skeleton.num_joints
        for side, seqs, c in (("3D", self.poses_3d, 3), ("2D", self.poses_2d, 2)):
            if seqs is None:
                continue
            for i, s in enumerate(seqs):
                if s.ndim != 3 or s.shape[1:] != (J, c):
                    raise ValueError(f"{side} sequence {i} has shape {s.shape}, expected (frames, {J}, {c})")
        if self.poses_3d is not None and self.poses_2d is not None:
            if len(self.poses_3d) != len(self.poses_2d):
                raise ValueError(f"{len(self.poses_3d)} 3D vs {len(self.poses_2d)} 2D sequences")
            for i, (a, b) in enumerate(zip(self.poses_3d, self.poses_2d)):
                if len(a) != len(b):
                    raise ValueError(f"sequence {i}: {len(a)} 3D frames vs {len(b)} 2D frames")

    @property
    def frame_counts(self) -> list[int]:
        seqs = self.poses_3d if self.poses_3d is not None else self.poses_2d
        return [len(s) for s in seqs]

    def __len__(self) -> int:
        return len(self.frame_counts)

    def subset(self, indices, split: str) -> "PoseDataset":
        pick = lambda seqs: None if seqs is None else [seqs[i] for i in indices]  # noqa: E731
        return PoseDataset(pick(self.poses_3d), pick(self.poses_2d), self.skeleton, split, self.stride,
                           dict(self.meta))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for seqs in (self.poses_2d, self.poses_3d):
            for s in seqs or []:
                h.update(np.ascontiguousarray(s, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------- camera


@dataclass(frozen=True)
class Camera:
    focal: tuple[float, float] = (1145.0, 1145.0)
    center: tuple[float, float] = (500.0, 500.0)
    width: int = 1000
    height: int = 1000

    def to_pixels(self, P2d) -> np.ndarray:
        P = np.asarray(P2d, dtype=np.float64)
        return np.stack([(P[..., 0] + 1) * self.width / 2, (P[..., 1] + 1) * self.height / 2], axis=-1)


def project_2d(P3d, camera: Camera = Camera()) -> np.ndarray:
    """Pinhole projection of ``(..., J, 3)`` camera-space points to normalized image coordinates."""
    P = np.asarray(P3d, dtype=np.float64)
    z = P[..., 2]
    bad = np.argwhere(z <= 0)
    if bad.size:
        shown = ", ".join(str(tuple(int(i) for i in b)) for b in bad[:8])
        raise ValueError(f"{len(bad)} point(s) at or behind the camera (index (frame, joint) ...): {shown}")
    u = camera.focal[0] * P[..., 0] / z + camera.center[0]
    v = camera.focal[1] * P[..., 1] / z + camera.center[1]
    return np.stack([u / camera.width * 2 - 1, v / camera.height * 2 - 1], axis=-1)


def add_noise(P2d, sigma: float, outlier_rate: float, seed: int) -> np.ndarray:
    """Gaussian jitter per coordinate, then uniform replacement of whole joints."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0 (got {sigma})")
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError(f"outlier_rate must lie in [0, 1] (got {outlier_rate})")
    P = np.array(P2d, dtype=np.float64)
    if sigma == 0 and outlier_rate == 0:
        return P
    rng = np.random.default_rng(seed)
    P += rng.normal(0.0, sigma, size=P.shape) if sigma > 0 else 0.0
    replace = rng.random(P.shape[:-1]) < outlier_rate
    P[replace] = rng.uniform(-1.0, 1.0, size=(int(replace.sum()), P.shape[-1]))
    return P


# ---------------------------------------------------------------- synthetic walker

# Rest-pose bone offsets from the parent joint (mm, body frame: x toward the
# subject's left, y down, z forward). Mirror-symmetric so left/right flips
# map the rest pose onto itself.
_REST_OFFSETS = np.array([
    [0, 0, 0],          # hip
    [0, -230, 0],       # spine
    [0, -250, 0],       # thorax
    [0, -110, 0],       # neck
    [0, -115, 0],       # head
    [-130, 0, 0],       # right_hip
    [0, 450, 0],        # right_knee
    [0, 440, 0],        # right_foot
    [130, 0, 0],        # left_hip
    [0, 450, 0],        # left_knee
    [0, 440, 0],        # left_foot
    [-160, 20, 0],      # right_shoulder
    [0, 280, 0],        # right_elbow
    [0, 250, 0],        # right_wrist
    [160, 20, 0],       # left_shoulder
    [0, 280, 0],        # left_elbow
    [0, 250, 0],        # left_wrist
], dtype=np.float64)

# Gait template: (joint, axis, amplitude rad, phase offset, one_sided). Axis 0
# swings in the sagittal plane; legs and arms counter-swing.
_GAIT = [
    (5, 0, 0.45, 0.0, False), (8, 0, 0.45, math.pi, False),
    (6, 0, 0.55, 0.5, True), (9, 0, 0.55, math.pi + 0.5, True),
    (11, 0, 0.35, math.pi, False), (14, 0, 0.35, 0.0, False),
    (12, 0, 0.40, math.pi + 0.3, True), (15, 0, 0.40, 0.3, True),
    (1, 0, 0.06, 0.0, False), (1, 1, 0.08, 0.5 * math.pi, False),
]


def _rotations(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices ``Rz @ Ry @ Rx`` for ``(..., 3)`` Euler angles."""
    ax, ay, az = (angles[..., i] for i in range(3))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    one, zero = np.ones_like(ax), np.zeros_like(ax)
    Rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(ax.shape + (3, 3))
    Ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(ax.shape + (3, 3))
    Rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(ax.shape + (3, 3))
    return Rz @ Ry @ Rx


def forward_kinematics(root: np.ndarray, local_angles: np.ndarray, skeleton: SkeletonSpec = H36M,
                       offsets: np.ndarray = _REST_OFFSETS) -> np.ndarray:
    """Joint positions ``(T, J, 3)`` from root positions ``(T, 3)`` and local Euler angles ``(T, J, 3)``."""
    T, J = local_angles.shape[:2]
    local = _rotations(local_angles)
    glob = np.empty((T, J, 3, 3))
    P = np.empty((T, J, 3))
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            glob[:, j] = local[:, j]
            P[:, j] = root
        else:
            glob[:, j] = glob[:, p] @ local[:, j]
            P[:, j] = P[:, p] + glob[:, p] @ offsets[j]
    return P


def _walk_angles(rng: np.random.Generator, T: int, J: int) -> np.ndarray:
    t = np.arange(T) / FPS
    freq = rng.uniform(0.7, 1.2)
    phase = rng.uniform(0, 2 * math.pi)
    ang = np.zeros((T, J, 3))
    for j, axis, amp, off, one_sided in _GAIT:
        s = np.sin(2 * math.pi * freq * t + phase + off)
        ang[:, j, axis] += amp * rng.uniform(0.8, 1.2) * ((1 + s) / 2 if one_sided else s)
    # band-limited per-joint wobble with random frequencies and phases
    for k in (1, 2):
        f = rng.uniform(0.2, 1.5, size=(J, 3)) * k
        ph = rng.uniform(0, 2 * math.pi, size=(J, 3))
        amp = rng.uniform(0.0, 0.08 / k, size=(J, 3))
        ang += amp * np.sin(2 * math.pi * f * t[:, None, None] + ph)
    return ang


def generate_synthetic(seed: int, num_sequences: int, T: int, skeleton: SkeletonSpec = H36M,
                       camera: Camera = Camera()) -> PoseDataset:
    """Walking kinematic-chain sequences in camera space with their 2D projections."""
    if T < 2:
        raise ValueError(f"T must be >= 2 (got {T})")
    if skeleton.num_joints != len(_REST_OFFSETS):
        raise ValueError("synthetic generator only supports the 17-joint layout")
    rng = np.random.default_rng(seed)
    seqs3d, seqs2d = [], []
    t = np.arange(T) / FPS
    for _ in range(num_sequences):
        ang = _walk_angles(rng, T, skeleton.num_joints)
        heading = rng.uniform(-math.pi, math.pi) + rng.uniform(-0.3, 0.3) * t
        ang[:, skeleton.root, 1] += heading
        speed = rng.uniform(800.0, 1400.0)
        start = np.array([rng.uniform(-400, 400), rng.uniform(-150, 150), rng.uniform(4500, 5000)])
        dist = speed * t
        root = np.stack([start[0] + np.sin(heading) * dist * 0.1,
                         start[1] + 20 * np.sin(4 * math.pi * t + rng.uniform(0, 2 * math.pi)),
                         start[2] + np.cos(heading) * dist * 0.1], axis=-1)
        P3 = forward_kinematics(root, ang, skeleton)
        seqs3d.append(P3)
        seqs2d.append(project_2d(P3, camera))
    meta = {"generator": "walker", "seed": seed, "fps": FPS,
            "camera": {"focal": list(camera.focal), "center": list(camera.center),
                       "width": camera.width, "height": camera.height}}
    return PoseDataset(seqs3d, seqs2d, skeleton, "all", 1, meta)


# ---------------------------------------------------------------- normalization, windows, splits


def normalize_2d(P2d, root: int = 0) -> tuple[np.ndarray, np.ndarray, float]:
    """Root-centre every frame and divide by the clip's bounding-box size.

    Returns ``(normalized, offset, scale)`` with ``offset`` the per-frame root
    ``(T, 1, 2)``; :func:`denormalize_2d` inverts it.
    """
    P = np.asarray(P2d, dtype=np.float64)
    offset = P[..., root:root + 1, :].copy()
    centered = P - offset
    extent = P.max(axis=(-3, -2)) - P.min(axis=(-3, -2))
    scale = float(np.max(extent))
    if not scale > 0:
        raise ValueError("cannot normalize a clip whose joints all coincide")
    return centered / scale, offset, scale


def denormalize_2d(normalized, offset, scale: float) -> np.ndarray:
    return np.asarray(normalized) * scale + offset


def window_starts(length: int, T: int, stride: int) -> list[int]:
    """Start frames of length-``T`` windows with the given stride; the last
    window is aligned to the sequence end, so with ``stride <= T`` every frame
    is covered."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1 (got {stride})")
    if length < T:
        raise ValueError(f"sequence of {length} frames is shorter than the window T={T}")
    starts = list(range(0, length - T + 1, stride))
    if starts[-1] != length - T:
        starts.append(length - T)
    return starts


@dataclass
class Windows:
    inputs: np.ndarray          # (n, T, J, 2) normalized 2D
    targets: np.ndarray | None  # (n, T, J, 3) root-relative mm
    sequence: np.ndarray        # source sequence index per window
    start: np.ndarray           # start frame per window
    offset: np.ndarray          # (n, T, 1, 2) 2D root offsets
    scale: np.ndarray           # (n,) per-clip 2D scale

    def __len__(self) -> int:
        return len(self.inputs)


def make_windows(dataset: PoseDataset, T: int, stride: int | None = None, dtype=np.float32) -> Windows:
    if dataset.poses_2d is None:
        raise ValueError("dataset has no 2D inputs")
    stride = dataset.stride if stride is None else stride
    root = dataset.skeleton.root
    xs, ys, seq, st, offs, scales = [], [], [], [], [], []
    for i, P2 in enumerate(dataset.poses_2d):
        for s in window_starts(len(P2), T, stride):
            x, off, sc = normalize_2d(P2[s:s + T], root)
            xs.append(x)
            offs.append(off)
            scales.append(sc)
            seq.append(i)
            st.append(s)
            if dataset.poses_3d is not None:
                y = dataset.poses_3d[i][s:s + T]
                ys.append(y - y[:, root:root + 1])
    return Windows(np.asarray(xs, dtype=dtype), np.asarray(ys, dtype=dtype) if ys else None,
                   np.asarray(seq), np.asarray(st), np.asarray(offs), np.asarray(scales))


def split_by_sequence(dataset: PoseDataset, val_fraction: float, seed: int = 0) -> tuple[PoseDataset, PoseDataset]:
    """Random train/validation split over whole sequences."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in [0, 1) (got {val_fraction})")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    val, train = sorted(order[:n_val].tolist()), sorted(order[n_val:].tolist())
    return dataset.subset(train, "train"), dataset.subset(val, "val")


# ---------------------------------------------------------------- HGPOSE1 files


def _header(dataset: PoseDataset) -> dict:
    return {
        "skeleton": json.loads(dataset.skeleton.to_json()),
        "num_sequences": len(dataset),
        "frames": dataset.frame_counts,
        "joints": dataset.skeleton.num_joints,
        "dtype": "<f4",
        "units": {"2d": "normalized_image", "3d": "mm"},
        "has_2d": dataset.poses_2d is not None,
        "has_3d": dataset.poses_3d is not None,
        "stride": dataset.stride,
        "split": dataset.split,
        "meta": dataset.meta,
    }


def to_bytes(dataset: PoseDataset) -> bytes:
    header = json.dumps(_header(dataset), sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    for seqs in (dataset.poses_2d, dataset.poses_3d):
        if seqs is not None:
            parts.append(np.concatenate(seqs).astype("<f4").tobytes())
    return b"".join(parts)


def save_dataset(path, dataset: PoseDataset) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(dataset))
    tmp.replace(path)


def from_bytes(buf: bytes) -> PoseDataset:
    if len(buf) < _PREFIX.size:
        raise DatasetFormatError(f"truncated file: {len(buf)} bytes, need at least {_PREFIX.size} at byte 0")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at byte 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte 8")
    end = _PREFIX.size + hlen
    if len(buf) < end:
        raise DatasetFormatError(f"truncated header at byte {len(buf)}: expected {hlen} header bytes from byte 16")
    try:
        header = json.loads(buf[_PREFIX.size:end].decode("utf-8"))
        skeleton = SkeletonSpec.from_json(header["skeleton"])
        frames = [int(f) for f in header["frames"]]
        J = int(header["joints"])
        has2, has3 = bool(header["has_2d"]), bool(header["has_3d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"invalid JSON header at byte 16: {exc}") from exc
    if header.get("dtype") != "<f4":
        raise DatasetFormatError(f"unsupported dtype {header.get('dtype')!r} in header at byte 16")
    if J != skeleton.num_joints or len(frames) != header.get("num_sequences", len(frames)):
        raise DatasetFormatError("header shape fields disagree with its skeleton/sequence list at byte 16")
    total = sum(frames)
    blocks = {}
    pos = end
    for key, c, present in (("2d", 2, has2), ("3d", 3, has3)):
        if not present:
            continue
        n = total * J * c
        nbytes = 4 * n
        if len(buf) < pos + nbytes:
            raise DatasetFormatError(
                f"truncated {key} block at byte {len(buf)}: expected {nbytes} bytes from byte {pos}")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(total, J, c)
        blocks[key] = np.split(arr.astype(np.float32), np.cumsum(frames)[:-1])
        pos += nbytes
    if pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - pos} trailing bytes at byte {pos}")
    return PoseDataset(blocks.get("3d"), blocks.get("2d"), skeleton, header.get("split", "all"),
                       int(header.get("stride", 1)), header.get("meta", {}))


def load_dataset(path) -> PoseDataset:
    return from_bytes(Path(path).read_bytes())


def dataset_to_json(dataset: PoseDataset) -> dict:
    seqs = []
    for i in range(len(dataset)):
        s = {}
        if dataset.poses_2d is not None:
            s["pose_2d"] = np.asarray(dataset.poses_2d[i], dtype=np.float64).tolist()
        if dataset.poses_3d is not None:
            s["pose_3d"] = np.asarray(dataset.poses_3d[i], dtype=np.float64).tolist()
        seqs.append(s)
    return {"skeleton": json.loads(dataset.skeleton.to_json()), "split": dataset.split,
            "stride": dataset.stride, "meta": dataset.meta, "sequences": seqs}


def dataset_from_json(d: dict) -> PoseDataset:
    """Inverse of :func:`dataset_to_json`; the skeleton defaults to the 17-joint layout."""
    skeleton = SkeletonSpec.from_json(d["skeleton"]) if "skeleton" in d else H36M
    seqs = d["sequences"]
    if not seqs:
        raise ValueError("JSON dataset has no sequences")

    def side(key):
        if all(key in s for s in seqs):
            return [np.asarray(s[key], dtype=np.float32) for s in seqs]
        if any(key in s for s in seqs):
            raise ValueError(f"{key!r} present in some sequences but not all")
        return None

    return PoseDataset(side("pose_3d"), side("pose_2d"), skeleton, d.get("split", "all"),
                       int(d.get("stride", 1)), d.get("meta", {}))
