"""Flat binary container for named float64 tensors.

Layout (all little-endian):

    magic   b"GTC1"
    u32     tensor count
    per tensor:
        u32     name length in bytes
        bytes   name (utf-8)
        u32     rank
        u64[r]  dims
        f64[n]  payload, row-major

The same per-tensor encoding is embedded inside federation wire messages, so
checkpoints and uplinks share one parser.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ProtocolError

MAGIC = b"GTC1"


def tensor_entry_size(name: str, shape: tuple[int, ...]) -> int:
    """Exact byte size one tensor occupies in the container."""
    n = 1
    for d in shape:
        n *= d
    return 4 + len(name.encode("utf-8")) + 4 + 8 * len(shape) + 8 * n


def pack_tensor(name: str, a: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(a, dtype=np.float64)
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
    return head + dims + a.astype("<f8").tobytes()


def unpack_tensor(buf: bytes, offset: int) -> tuple[str, np.ndarray, int]:
    """Decode one tensor at `offset`; returns (name, array, next offset)."""
    (name_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    name = buf[offset : offset + name_len].decode("utf-8")
    offset += name_len
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset += 8 * rank
    n = 1
    for d in dims:
        n *= d
    a = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(dims).copy()
    offset += 8 * n
    return name, a, offset


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    body = b"".join(pack_tensor(name, a) for name, a in tensors.items())
    return MAGIC + struct.pack("<I", len(tensors)) + body


def unpack_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ProtocolError(f"bad tensor container magic {buf[:4]!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    out: dict[str, np.ndarray] = {}
    offset = 8
    for _ in range(count):
        name, a, offset = unpack_tensor(buf, offset)
        out[name] = a
    if offset != len(buf):
        raise ProtocolError(f"trailing bytes in tensor container ({len(buf) - offset})")
    return out


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> int:
    data = pack_tensors(tensors)
    Path(path).write_bytes(data)
    return len(data)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return unpack_tensors(Path(path).read_bytes())
