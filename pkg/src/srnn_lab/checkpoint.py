"""Flat binary parameter container.

Layout (all integers little-endian)::

    magic        5 bytes, e.g. b"SRNN1"
    meta_len     uint32, followed by meta_len bytes of UTF-8 "key=value" lines
    n_arrays     uint32
    per array:   uint16 name_len, name (UTF-8), uint8 ndim, ndim * uint64 dims,
                 prod(dims) float64 values in C order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_LEN = 5


class CheckpointError(ValueError):
    pass


def save(path, magic: bytes, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    if len(magic) != MAGIC_LEN:
        raise ValueError(f"magic must be {MAGIC_LEN} bytes, got {magic!r}")
    meta_bytes = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    chunks = [magic, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> tuple[bytes, dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}, needed {n} more")
        out = buf[pos : pos + n]
        pos += n
        return out

    magic = take(MAGIC_LEN)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return magic, meta, arrays
