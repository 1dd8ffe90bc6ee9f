"""GCDC binary checkpoints: a flat, ordered map of named float64 tensors.

Layout (little-endian)::

    b"GCDC"  u32 version  u32 n_tensors
    repeat n_tensors:
        u32 name_len  name (utf-8)  u32 rank  rank x u32 dims  float64 payload

Scalars are rank-0 tensors. Tensor order is preserved, so saving the same
map twice gives identical bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

GCDC_MAGIC = b"GCDC"
GCDC_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [GCDC_MAGIC, struct.pack("<II", GCDC_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    def need(off: int, size: int, what: str):
        if off + size > len(buf):
            raise FormatError(f"truncated while reading {what}", off)

    need(0, 12, "header")
    if buf[:4] != GCDC_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {GCDC_MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != GCDC_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, name_len, "name")
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        need(off, 4, f"rank of {name!r}")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 8
        need(off, size, f"payload of {name!r}")
        out[name] = np.frombuffer(buf, "<f8", size // 8, off).reshape(dims).astype(np.float64)
        off += size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last tensor", off)
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
