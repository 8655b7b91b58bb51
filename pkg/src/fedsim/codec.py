"""Frame and payload codec.

A frame is ``length:u32 big-endian | kind:u8 | payload`` where ``length`` is
the payload byte count. Payloads are compact JSON objects (UTF-8, sorted
keys); parameter vectors travel as base64 of :meth:`ParamVector.to_bytes`.
An empty payload is allowed only for Shutdown (meaning "everyone").

Every decoding failure raises a subclass of :class:`FrameError`.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import struct

from .learn import ParamVector

HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 64 * 1024 * 1024


class FrameKind(enum.IntEnum):
    REGISTER = 1
    GLOBAL_MODEL = 2
    UPDATE = 3
    CONTROL = 4
    SHUTDOWN = 5
    NODE_HELLO = 6
    NODE_ASSIGN = 7
    ACK = 8


class FrameError(Exception):
    pass


class ShortRead(FrameError):
    pass


class UnknownKind(FrameError):
    pass


class MalformedPayload(FrameError):
    pass


class TrailingData(FrameError):
    pass


_INT = (int,)
_NUM = (int, float)

# field -> (accepted types, required)
SCHEMAS: dict[FrameKind, dict[str, tuple[tuple[type, ...], bool]]] = {
    FrameKind.REGISTER: {"sender": (_INT, True), "client_id": (_INT, True)},
    FrameKind.GLOBAL_MODEL: {
        "sender": (_INT, True),
        "version": (_INT, True),
        "round": (_INT, True),
        "targets": ((list,), True),
        "params_b64": ((str,), True),
    },
    FrameKind.UPDATE: {
        "sender": (_INT, True),
        "client_id": (_INT, True),
        "base_version": (_INT, True),
        "n_samples": (_INT, True),
        "tau": (_INT, True),
        "params_b64": ((str,), True),
        "mask": ((list,), False),
        "metrics": ((dict,), False),
    },
    FrameKind.CONTROL: {"sender": (_INT, True), "action": ((str,), True)},
    FrameKind.SHUTDOWN: {"sender": (_INT, True), "targets": ((list,), False)},
    FrameKind.NODE_HELLO: {"capacity": (_INT, True), "token": ((str,), False)},
    FrameKind.NODE_ASSIGN: {
        "node_id": (_INT, True),
        "profiles": ((list,), True),
        "store": ((dict,), True),
        "experiment": ((dict,), True),
    },
    FrameKind.ACK: {"ok": ((bool,), True)},
}
# kinds whose payload may carry extra, free-form fields
_OPEN_KINDS = {FrameKind.CONTROL, FrameKind.NODE_ASSIGN, FrameKind.ACK, FrameKind.GLOBAL_MODEL}


def params_to_b64(params: ParamVector) -> str:
    return base64.b64encode(params.to_bytes()).decode("ascii")


def b64_to_params(text: str) -> ParamVector:
    try:
        return ParamVector.from_bytes(base64.b64decode(text.encode("ascii"), validate=True))
    except (binascii.Error, ValueError, UnicodeEncodeError) as exc:
        raise MalformedPayload(f"bad parameter blob: {exc}") from exc


def _validate(kind: FrameKind, fields: dict, exc_type=MalformedPayload) -> None:
    if not isinstance(fields, dict):
        raise exc_type(f"{kind.name} payload must be an object")
    schema = SCHEMAS[kind]
    for name, (types, required) in schema.items():
        if name not in fields:
            if required:
                raise exc_type(f"{kind.name} payload missing field {name!r}")
            continue
        value = fields[name]
        if isinstance(value, bool) and bool not in types:
            raise exc_type(f"{kind.name}.{name} has type bool")
        if not isinstance(value, types):
            raise exc_type(f"{kind.name}.{name} has type {type(value).__name__}")
    if kind not in _OPEN_KINDS:
        extra = set(fields) - set(schema)
        if extra:
            raise exc_type(f"{kind.name} payload has unknown fields {sorted(extra)}")
    if kind == FrameKind.UPDATE:
        if fields["n_samples"] < 1 or fields["base_version"] < 0 or fields["tau"] < 0:
            raise exc_type("UPDATE counts out of range")
        if "mask" in fields and (
            len(fields["mask"]) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in fields["mask"])
        ):
            raise exc_type("UPDATE.mask must be [start, stop]")
    if kind in (FrameKind.GLOBAL_MODEL, FrameKind.SHUTDOWN) and "targets" in fields:
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in fields["targets"]):
            raise exc_type(f"{kind.name}.targets must be integers")
    if "params_b64" in fields and exc_type is MalformedPayload:
        b64_to_params(fields["params_b64"])


def encode_payload(kind: FrameKind | int, fields: dict | None) -> bytes:
    kind = FrameKind(kind)
    if not fields:
        if kind != FrameKind.SHUTDOWN:
            raise ValueError(f"{kind.name} requires a payload")
        return b""
    _validate(kind, fields, ValueError)
    return json.dumps(fields, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def decode_payload(kind: FrameKind | int, payload: bytes) -> dict:
    try:
        kind = FrameKind(kind)
    except ValueError:
        raise UnknownKind(f"unknown frame kind {kind}") from None
    if not payload:
        if kind == FrameKind.SHUTDOWN:
            return {}
        raise MalformedPayload(f"{kind.name} frame has an empty payload")
    try:
        fields = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise MalformedPayload(f"{kind.name} payload is not valid JSON: {exc}") from exc
    _validate(kind, fields)
    return fields


def encode_frame(kind: FrameKind | int, fields: dict | None = None) -> bytes:
    payload = encode_payload(kind, fields)
    return HEADER.pack(len(payload), int(kind)) + payload


def frame_from_payload(kind: FrameKind | int, payload: bytes) -> bytes:
    return HEADER.pack(len(payload), int(kind)) + payload


def parse_header(buf: bytes) -> tuple[FrameKind, int]:
    """Validate a frame header; returns (kind, payload length)."""
    if len(buf) < HEADER.size:
        raise ShortRead(f"need {HEADER.size} header bytes, have {len(buf)}")
    length, raw_kind = HEADER.unpack_from(buf, 0)
    try:
        kind = FrameKind(raw_kind)
    except ValueError:
        raise UnknownKind(f"unknown frame kind {raw_kind}") from None
    if length > MAX_PAYLOAD:
        raise MalformedPayload(f"frame length {length} exceeds limit {MAX_PAYLOAD}")
    return kind, length


def split_frame(buf: bytes) -> tuple[FrameKind, bytes, bytes]:
    """Peel one frame off ``buf``; returns (kind, payload, rest)."""
    kind, length = parse_header(buf)
    end = HEADER.size + length
    if len(buf) < end:
        raise ShortRead(f"frame claims {length} payload bytes, {len(buf) - HEADER.size} available")
    return kind, bytes(buf[HEADER.size : end]), bytes(buf[end:])


def decode_frame(buf: bytes) -> tuple[FrameKind, dict]:
    kind, payload, rest = split_frame(buf)
    if rest:
        raise TrailingData(f"{len(rest)} bytes after the frame")
    return kind, decode_payload(kind, payload)
