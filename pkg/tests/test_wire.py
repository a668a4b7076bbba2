from __future__ import annotations

import numpy as np
import pytest

from geofed.errors import ProtocolError
from geofed.geometry import GramMatrix, gram_from_embeddings
from geofed.numerics import Matrix
from geofed.rng import Rng
from geofed.tensorio import load_tensors, pack_tensors, save_tensors, tensor_entry_size, unpack_tensors
from geofed.uncertainty import UncertaintySummary
from geofed.wire import (
    NodeUpdateMessage,
    ServerBroadcast,
    message_size,
    pack_broadcast,
    pack_message,
    unpack_broadcast,
    unpack_message,
    walk_message_tensors,
)


def _message(seed: int = 0, kind: str = "dora") -> NodeUpdateMessage:
    rng = Rng(seed, "wire")
    tensors = {
        "update.block0.wq.b": rng.normal(8, 2),
        "update.block0.wq.m": rng.normal(1, 8),
        "update.head.delta": rng.normal(8, 4),
    }
    gram = gram_from_embeddings(rng.normal(5, 6), node_id=3, round=2)
    summary = UncertaintySummary(3, 0.25, 4.0, 17, 0.125)
    return NodeUpdateMessage(3, 2, kind, 0xDEADBEEF, tensors, gram, summary)


def test_message_roundtrip_preserves_everything():
    msg = _message()
    buf = pack_message(msg)
    assert buf[:4] == b"GFL1"
    out = unpack_message(buf)
    assert out.node_id == 3 and out.round == 2 and out.kind == "dora"
    assert out.basis_fingerprint == 0xDEADBEEF
    assert list(out.tensors) == list(msg.tensors)
    for k in msg.tensors:
        assert np.array_equal(out.tensors[k], msg.tensors[k])
    assert np.array_equal(out.gram.matrix.array(), msg.gram.matrix.array())
    assert out.uncertainty == msg.uncertainty
    assert out.payload_bytes == len(buf) == msg.payload_bytes


def test_message_size_formula_is_exact():
    msg = _message()
    buf = pack_message(msg)
    shapes = {k: v.shape for k, v in msg.tensors.items()}
    assert message_size(shapes, msg.gram.size) == len(buf)


def test_message_serialization_is_deterministic():
    assert pack_message(_message()) == pack_message(_message())


def test_message_bad_magic_and_truncation():
    buf = pack_message(_message())
    with pytest.raises(ProtocolError):
        unpack_message(b"XXXX" + buf[4:])
    with pytest.raises(ProtocolError):
        unpack_message(buf[:-1])


def test_gram_wire_encoding_is_b_then_row_major_f64():
    msg = _message()
    buf = pack_message(msg)
    g = msg.gram.matrix.array()
    encoded = np.asarray(g, dtype="<f8").tobytes()
    idx = buf.find(encoded)
    assert idx > 0
    b_field = int.from_bytes(buf[idx - 4 : idx], "little")
    assert b_field == msg.gram.size


def test_broadcast_roundtrip():
    rng = Rng(1, "bc")
    kern_arr = gram_from_embeddings(rng.normal(4, 5)).matrix.array()
    from geofed.geometry import ConsensusKernel

    bcast = ServerBroadcast(
        round=5,
        kind="lora",
        tensors={"update.block0.wq.b": rng.normal(8, 2), "head": rng.normal(8, 4)},
        consensus=ConsensusKernel(Matrix.from_array(kern_arr), contributing_nodes=2, round=4),
    )
    out = unpack_broadcast(pack_broadcast(bcast))
    assert out.round == 5 and out.kind == "lora"
    assert np.array_equal(out.consensus.g_bar.array(), kern_arr)
    assert np.array_equal(out.tensors["head"], bcast.tensors["head"])

    empty = ServerBroadcast(round=0, kind="lora", tensors={"head": rng.normal(8, 4)}, consensus=None)
    assert unpack_broadcast(pack_broadcast(empty)).consensus is None


def test_walk_message_tensors():
    names = [name for name, _ in walk_message_tensors(pack_message(_message()))]
    assert names == ["update.block0.wq.b", "update.block0.wq.m", "update.head.delta"]


def test_tensor_container_roundtrip(tmp_path):
    rng = Rng(2, "tc")
    tensors = {"a": rng.normal(3, 4), "nested.name": rng.normal(1, 7), "scalarish": rng.normal(1, 1)}
    buf = pack_tensors(tensors)
    assert buf[:4] == b"GTC1"
    out = unpack_tensors(buf)
    assert list(out) == list(tensors)
    for k in tensors:
        assert np.array_equal(out[k], tensors[k])
    path = tmp_path / "t.bin"
    n = save_tensors(path, tensors)
    assert path.stat().st_size == n
    again = load_tensors(path)
    assert all(np.array_equal(again[k], tensors[k]) for k in tensors)


def test_tensor_entry_size_matches_encoding():
    rng = Rng(3, "sz")
    a = rng.normal(4, 6)
    from geofed.tensorio import pack_tensor

    assert tensor_entry_size("some.name", a.shape) == len(pack_tensor("some.name", a))


def test_container_trailing_bytes_rejected():
    buf = pack_tensors({"a": np.zeros((2, 2))})
    with pytest.raises(ProtocolError):
        unpack_tensors(buf + b"\x00")


def test_gram_matrix_shape_check():
    from geofed.errors import ShapeError

    with pytest.raises(ShapeError):
        GramMatrix(Matrix(np.zeros((2, 3))))
