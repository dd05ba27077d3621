"""Binary checkpoints and JSONL metric logs.

Checkpoint layout (all integers little-endian):

    magic   b"UCOMCKPT"
    u32     format version
    u64     length of the UTF-8 JSON header, then the header itself
    u32     number of tensor blocks
    per block:
        u16 name length, UTF-8 name
        u8  ndim, ndim x u32 extents
        float32 little-endian data, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UCOMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 20
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return header, tensors


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(named) -> str:
    """SHA-256 over parameter names and raw bytes, in name order."""
    h = hashlib.sha256()
    items = named.items() if isinstance(named, dict) else named
    for name, p in sorted(items, key=lambda kv: kv[0]):
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class MetricsLog:
    """Append-only JSONL log; steps must not decrease within a (variant, seed) stream."""

    def __init__(self, path, **context):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.context = context
        self._last_step = -1
        self.path.write_text("")

    def write(self, step: int, **metrics) -> dict:
        if step < self._last_step:
            raise ValueError(f"metrics step {step} precedes {self._last_step}")
        self._last_step = step
        rec = {**self.context, "step": int(step), **{k: _plain(v) for k, v in metrics.items()}}
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
