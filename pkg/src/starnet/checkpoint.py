"""Binary checkpoint container.

Layout: 8-byte magic "STARCKPT", u32 version, u32 config-blob length,
UTF-8 JSON config blob, u32 tensor count, then per-tensor records
(u32 name length, name bytes, u32 rank, u32 dims..., little-endian f32
payload).  Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"STARCKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict                      # name -> float32 ndarray
    meta: dict = field(default_factory=dict)   # epoch, optimizer scalars, rng state

    def config_blob(self) -> bytes:
        return json.dumps({"model_config": self.model_config, "meta": self.meta},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = ckpt.config_blob()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            # note: ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(ckpt.tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    off = 8

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated")
        chunk = data[off:off + n]
        off += n
        return chunk

    version, blob_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported version {version} (expected {VERSION})")
    blob = json.loads(take(blob_len).decode("utf-8"))
    count, = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        nlen, = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        rank, = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(size * 4), dtype="<f4").reshape(shape).copy()
        tensors[name] = arr
    if off != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return Checkpoint(model_config=blob["model_config"], tensors=tensors,
                      meta=blob.get("meta", {}))
