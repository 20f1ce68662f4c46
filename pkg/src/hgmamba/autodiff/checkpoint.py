"""Binary checkpoints: parameters, AdamW moments, and buffers.

Layout (all integers little-endian)::

    b"HGM1"                 4-byte magic / version tag
    u32  header_len
    header_len bytes        UTF-8 JSON: meta, optimizer step, tensor table
    raw float32 LE data     concatenated in table order

Each tensor-table entry gives ``name``, ``kind`` (param/m/v/buffer),
``shape`` and byte ``offset`` into the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"HGM1"
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0

    def push(name, kind, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, p in store.params.items():
        push(name, "param", p.data)
        push(name, "m", p.m)
        push(name, "v", p.v)
    for name, arr in store.buffers().items():
        push(name, "buffer", arr)
    header = json.dumps({"meta": meta or {}, "step": store.step, "tensors": entries}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Return ``(header, {(kind, name): array})`` without touching any store."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header length at byte 4")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated JSON header at byte 8")
    header = json.loads(raw[8:8 + hlen].decode())
    base = 8 + hlen
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 4 * n > len(raw):
            raise CheckpointError(f"{path}: tensor {e['name']!r} truncated at byte {start}")
        arrays[(e["kind"], e["name"])] = np.frombuffer(raw, dtype=_F32, count=n, offset=start).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path: str | Path, store: ParamStore) -> dict:
    """Restore parameters, moments, step and buffers into ``store``; returns meta."""
    header, arrays = read_checkpoint(path)
    for name, p in store.params.items():
        if ("param", name) not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        value = arrays[("param", name)]
        if value.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {value.shape}, expected {p.shape}")
        p.data = value.astype(store.dtype)
        p.m = arrays[("m", name)].astype(store.dtype)
        p.v = arrays[("v", name)].astype(store.dtype)
        p.grad = None
    store.load_buffers({name: a for (kind, name), a in arrays.items() if kind == "buffer"})
    store.step = int(header["step"])
    return header["meta"]
