"""Versioned binary container for named float64 arrays.

Layout (all little-endian): 8-byte magic, u32 format version, u32 record
count, then per record: u16 name length, utf-8 name, u8 ndim, u32 dims,
raw float64 data. Records are sorted by name so files are byte-stable.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DBREGCKP"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays) -> None:
    items = sorted(arrays.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr, dtype="<f8", order="C")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}: {e}") from e
    if off != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return out
