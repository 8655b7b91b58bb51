import json
import os
import random
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsim import codec
from fedsim.codec import FrameError, FrameKind, MalformedPayload, ShortRead, TrailingData, UnknownKind
from fedsim.learn import ParamVector
from oracles import ref_frame, ref_param_bytes


def test_shutdown_empty_payload_is_five_bytes():
    assert codec.encode_frame(FrameKind.SHUTDOWN) == bytes([0, 0, 0, 0, 5])
    assert codec.decode_frame(bytes([0, 0, 0, 0, 5])) == (FrameKind.SHUTDOWN, {})


def test_short_read_has_no_partial_delivery():
    frame = struct.pack(">IB", 10, 3) + b"123456"
    with pytest.raises(ShortRead):
        codec.decode_frame(frame)
    with pytest.raises(ShortRead):
        codec.decode_frame(b"\x00\x00")


def test_unknown_kind_and_trailing_data_are_distinct():
    with pytest.raises(UnknownKind):
        codec.decode_frame(bytes([0, 0, 0, 0, 42]))
    with pytest.raises(TrailingData):
        codec.decode_frame(codec.encode_frame(FrameKind.SHUTDOWN) + b"\x00")
    with pytest.raises(MalformedPayload):
        codec.decode_frame(struct.pack(">IB", 2, 1) + b"{}")


def test_matches_reference_encoder():
    fields = {"sender": 3, "client_id": 3}
    assert codec.encode_frame(FrameKind.REGISTER, fields) == ref_frame("Register", fields)


def test_param_serialization_matches_reference_layout():
    p = ParamVector(np.array([1.5, -0.0, 2.0, 3.25, 4.0, 5.0]), ((2, 2), (1, 2)))
    assert p.to_bytes() == ref_param_bytes([(2, 2), (1, 2)], [1.5, -0.0, 2.0, 3.25, 4.0, 5.0])


_f64 = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def param_vectors(draw):
    shapes = draw(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=3))
    n = sum(r * c for r, c in shapes)
    values = draw(st.lists(_f64, min_size=n, max_size=n))
    return ParamVector(np.array(values, dtype=np.float64), tuple(shapes))


@given(
    param_vectors(),
    st.integers(1, 10_000),
    st.integers(0, 10_000),
    st.integers(1, 10_000),
    st.integers(0, 10_000),
    st.one_of(st.none(), st.tuples(st.integers(0, 50), st.integers(0, 50)).map(list)),
)
def test_update_round_trip_is_bit_exact(params, cid, base, n, tau, mask):
    fields = {
        "sender": cid,
        "client_id": cid,
        "base_version": base,
        "n_samples": n,
        "tau": tau,
        "params_b64": codec.params_to_b64(params),
    }
    if mask is not None:
        fields["mask"] = mask
    kind, back = codec.decode_frame(codec.encode_frame(FrameKind.UPDATE, fields))
    assert kind == FrameKind.UPDATE and back == fields
    restored = codec.b64_to_params(back["params_b64"])
    assert restored.shapes == params.shapes
    assert restored.values.tobytes() == params.values.tobytes()


def _random_message(rng: random.Random):
    kind = rng.choice(list(FrameKind))
    sender = rng.randrange(0, 1000)
    if kind == FrameKind.SHUTDOWN:
        return kind, (rng.choice([None, {"sender": 0, "targets": [rng.randrange(1, 99)]}]))
    if kind == FrameKind.REGISTER:
        return kind, {"sender": sender, "client_id": sender}
    if kind == FrameKind.CONTROL:
        return kind, {"sender": sender, "action": rng.choice(["client_stopped", "client_failed"]), "client_id": sender}
    if kind == FrameKind.NODE_HELLO:
        return kind, {"capacity": rng.randrange(1, 100)}
    if kind == FrameKind.ACK:
        return kind, {"ok": rng.random() < 0.5, "node_id": rng.randrange(10)}
    if kind == FrameKind.NODE_ASSIGN:
        return kind, {"node_id": 1, "profiles": [{"id": 2, "speed_factor": rng.random()}], "store": {}, "experiment": {}}
    n = rng.randrange(1, 30)
    raw = np.frombuffer(os.urandom(8 * n), dtype=np.float64)
    raw = np.where(np.isfinite(raw), raw, rng.random())
    params = codec.params_to_b64(ParamVector(raw.copy(), ((1, n),)))
    if kind == FrameKind.GLOBAL_MODEL:
        return kind, {"sender": 0, "version": rng.randrange(100), "round": 0, "targets": [1, 2], "params_b64": params}
    return kind, {
        "sender": sender,
        "client_id": sender,
        "base_version": 0,
        "n_samples": 1 + rng.randrange(99),
        "tau": rng.randrange(9),
        "params_b64": params,
    }


def test_thousand_random_messages_round_trip():
    rng = random.Random(2024)
    stream = b""
    sent = []
    for _ in range(1000):
        kind, fields = _random_message(rng)
        sent.append((kind, fields or {}))
        frame = codec.encode_frame(kind, fields)
        assert codec.decode_frame(frame) == (kind, fields or {})
        stream += frame
    received = []
    while stream:
        kind, payload, stream = codec.split_frame(stream)
        received.append((kind, codec.decode_payload(kind, payload)))
    assert received == sent


def test_fuzzed_bytes_only_raise_classified_errors():
    rng = random.Random(7)
    outcomes = {"ok": 0, "error": 0}
    valid = codec.encode_frame(FrameKind.REGISTER, {"sender": 1, "client_id": 1})
    for i in range(10_000):
        if i % 2:
            buf = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 40)))
        else:  # mutate a valid frame so some inputs get past the header
            buf = bytearray(valid)
            for _ in range(rng.randrange(1, 4)):
                buf[rng.randrange(len(buf))] = rng.randrange(256)
            buf = bytes(buf)
        try:
            codec.decode_frame(buf)
            outcomes["ok"] += 1
        except FrameError:
            outcomes["error"] += 1
    assert outcomes["error"] > 0
    assert sum(outcomes.values()) == 10_000


@pytest.mark.parametrize(
    "kind, fields",
    [
        (FrameKind.UPDATE, {"sender": 1, "client_id": 1, "base_version": 0, "n_samples": 0, "tau": 1, "params_b64": ""}),
        (FrameKind.REGISTER, {"sender": True, "client_id": 1}),
        (FrameKind.REGISTER, {"sender": 1, "client_id": 1, "extra": 1}),
        (FrameKind.GLOBAL_MODEL, {"sender": 0, "version": 0, "round": 0, "targets": [1], "params_b64": "@@"}),
    ],
)
def test_invalid_fields_rejected(kind, fields):
    payload = json.dumps(fields).encode()
    with pytest.raises(MalformedPayload):
        codec.decode_payload(kind, payload)


def test_oversized_length_rejected_before_reading():
    with pytest.raises(MalformedPayload, match="exceeds"):
        codec.parse_header(struct.pack(">IB", 2**31, 3))
