"""Binary checkpoint: versioned JSON header, then named float payloads.

Layout: magic, format version, a JSON header (model/training metadata, rng
states, optimizer scalars), then a count of arrays followed by one
(name, shape, little-endian float64 payload) record per array. Parameters
and optimizer moments are stored bit-exactly, so reloading resumes training
identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["CheckpointVersionMismatch", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"SLOTMEM\x00"
FORMAT_VERSION = 1


class CheckpointVersionMismatch(Exception):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointVersionMismatch("checkpoint truncated")
    return buf


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise CheckpointVersionMismatch(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise CheckpointVersionMismatch(
                f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
        (header_len,) = struct.unpack("<Q", _read_exact(f, 8))
        header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointVersionMismatch("header/container version disagree")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", _read_exact(f, 8))
            arr = np.frombuffer(_read_exact(f, nbytes), dtype="<f8").reshape(shape)
            arrays[name] = arr.astype(np.float64)
        return Checkpoint(meta=header["meta"], arrays=arrays)
