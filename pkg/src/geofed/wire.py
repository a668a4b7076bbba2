"""Wire format for federation traffic (magic "GFL1"), also used as the
on-disk message dump format.

Uplink message layout, little-endian, field order fixed:

    bytes   magic "GFL1"
    u64     payload_bytes: total length of this message including the magic
    u32     version (1)
    u32     node_id
    u32     round
    u8      kind: 0 lora, 1 dora, 2 dense
    u64     basis fingerprint (shared frozen low-rank basis provenance)
    u32     tensor count, then tensors in tensorio entry format
    u32     gram size B, then B*B f64 row-major
    f64     mean_u, f64 mean_inv_u, f64 clamped_fraction, u64 n_samples

Broadcast layout (magic "GFB1") mirrors the header, carries the shared
tensors plus an optional consensus kernel. Messages never contain adapter
weights or raw samples; tests walk the serialized bytes to enforce that.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError
from .geometry import ConsensusKernel, GramMatrix
from .numerics import Matrix
from .tensorio import pack_tensor, tensor_entry_size, unpack_tensor
from .uncertainty import UncertaintySummary

MESSAGE_MAGIC = b"GFL1"
BROADCAST_MAGIC = b"GFB1"
WIRE_VERSION = 1

KIND_CODES = {"lora": 0, "dora": 1, "dense": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

# magic + payload u64 + version u32 + node u32 + round u32 + kind u8 + basis u64 + ntensors u32
_MSG_HEADER = 4 + 8 + 4 + 4 + 4 + 1 + 8 + 4
_SUMMARY_BYTES = 8 + 8 + 8 + 8
_BCAST_HEADER = 4 + 8 + 4 + 4 + 1 + 1 + 4


@dataclass
class NodeUpdateMessage:
    """One node's per-round upload. payload_bytes always equals len(pack())."""

    node_id: int
    round: int
    kind: str
    basis_fingerprint: int
    tensors: dict[str, np.ndarray]
    gram: GramMatrix
    uncertainty: UncertaintySummary
    payload_bytes: int = 0


@dataclass
class ServerBroadcast:
    """Shared state pushed to every node at the start of a round."""

    round: int
    kind: str
    tensors: dict[str, np.ndarray]
    consensus: ConsensusKernel | None = None


def gram_bytes(b: int) -> int:
    return 4 + 8 * b * b


def message_size(tensor_shapes: dict[str, tuple[int, ...]], gram_b: int) -> int:
    """Exact serialized size of a message with the given tensor layout."""
    body = sum(tensor_entry_size(name, shape) for name, shape in tensor_shapes.items())
    return _MSG_HEADER + body + gram_bytes(gram_b) + _SUMMARY_BYTES


def broadcast_size(tensor_shapes: dict[str, tuple[int, ...]], gram_b: int | None) -> int:
    body = sum(tensor_entry_size(name, shape) for name, shape in tensor_shapes.items())
    return _BCAST_HEADER + body + (gram_bytes(gram_b) if gram_b else 0)


def _pack_gram(g: np.ndarray) -> bytes:
    return struct.pack("<I", g.shape[0]) + np.ascontiguousarray(g, dtype="<f8").tobytes()


def _unpack_gram(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    (b,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    g = np.frombuffer(buf, dtype="<f8", count=b * b, offset=offset).reshape(b, b).copy()
    return g, offset + 8 * b * b


def pack_message(msg: NodeUpdateMessage) -> bytes:
    body = struct.pack(
        "<IIIBQI",
        WIRE_VERSION,
        msg.node_id,
        msg.round,
        KIND_CODES[msg.kind],
        msg.basis_fingerprint,
        len(msg.tensors),
    )
    body += b"".join(pack_tensor(name, a) for name, a in msg.tensors.items())
    body += _pack_gram(msg.gram.matrix.array())
    u = msg.uncertainty
    body += struct.pack("<dddQ", u.mean_u, u.mean_inv_u, u.clamped_fraction, u.n_samples)
    total = len(MESSAGE_MAGIC) + 8 + len(body)
    msg.payload_bytes = total
    return MESSAGE_MAGIC + struct.pack("<Q", total) + body


def unpack_message(buf: bytes) -> NodeUpdateMessage:
    if buf[:4] != MESSAGE_MAGIC:
        raise ProtocolError(f"bad message magic {buf[:4]!r}")
    (total,) = struct.unpack_from("<Q", buf, 4)
    if total != len(buf):
        raise ProtocolError(f"declared size {total} != actual {len(buf)}")
    version, node_id, round_, kind_code, basis, n_tensors = struct.unpack_from("<IIIBQI", buf, 12)
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    offset = 12 + struct.calcsize("<IIIBQI")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name, a, offset = unpack_tensor(buf, offset)
        tensors[name] = a
    g, offset = _unpack_gram(buf, offset)
    mean_u, mean_inv_u, clamped_fraction, n_samples = struct.unpack_from("<dddQ", buf, offset)
    offset += _SUMMARY_BYTES
    if offset != len(buf):
        raise ProtocolError(f"trailing bytes in message ({len(buf) - offset})")
    return NodeUpdateMessage(
        node_id=node_id,
        round=round_,
        kind=KIND_NAMES[kind_code],
        basis_fingerprint=basis,
        tensors=tensors,
        gram=GramMatrix(Matrix.from_array(g), node_id=node_id, round=round_),
        uncertainty=UncertaintySummary(node_id, mean_u, mean_inv_u, int(n_samples), clamped_fraction),
        payload_bytes=total,
    )


def pack_broadcast(bcast: ServerBroadcast) -> bytes:
    body = struct.pack(
        "<IIBBI",
        WIRE_VERSION,
        bcast.round,
        KIND_CODES[bcast.kind],
        1 if bcast.consensus is not None else 0,
        len(bcast.tensors),
    )
    body += b"".join(pack_tensor(name, a) for name, a in bcast.tensors.items())
    if bcast.consensus is not None:
        body += _pack_gram(bcast.consensus.g_bar.array())
    total = len(BROADCAST_MAGIC) + 8 + len(body)
    return BROADCAST_MAGIC + struct.pack("<Q", total) + body


def unpack_broadcast(buf: bytes) -> ServerBroadcast:
    if buf[:4] != BROADCAST_MAGIC:
        raise ProtocolError(f"bad broadcast magic {buf[:4]!r}")
    (total,) = struct.unpack_from("<Q", buf, 4)
    if total != len(buf):
        raise ProtocolError(f"declared size {total} != actual {len(buf)}")
    version, round_, kind_code, has_consensus, n_tensors = struct.unpack_from("<IIBBI", buf, 12)
    offset = 12 + struct.calcsize("<IIBBI")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name, a, offset = unpack_tensor(buf, offset)
        tensors[name] = a
    consensus = None
    if has_consensus:
        g, offset = _unpack_gram(buf, offset)
        consensus = ConsensusKernel(Matrix.from_array(g), contributing_nodes=0, round=round_)
    return ServerBroadcast(round=round_, kind=KIND_NAMES[kind_code], tensors=tensors, consensus=consensus)


def walk_message_tensors(buf: bytes) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every tensor in a serialized message (for audits)."""
    msg = unpack_message(buf)
    return [(name, tuple(a.shape)) for name, a in msg.tensors.items()]
