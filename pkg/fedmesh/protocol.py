"""
Every byte that crosses a wire between processes.

Peer frames (TCP): u32 big-endian length of everything after the length field,
one message-type byte, then the payload. Integers in frames are big-endian;
the MODEL parameter payload keeps the little-endian layout of
mlp.serialize_params.

    HELLO  0x01  node_id u16
    MODEL  0x02  round u32, node_id u16, params payload
    BYE    0x03  (empty)

Metric reporting (HTTP): POST {endpoint}/metrics and POST {endpoint}/summary
with JSON bodies; see helper_functions.post_json_with_retry for the retry loop.
"""

import logging
import struct
from dataclasses import dataclass

from . import constants
from .errors import (
    FrameTruncatedError,
    OversizeFrameError,
    PeerClosedError,
    ProtocolError,
    UnknownMessageTypeError,
)
from .helper_functions import join_url, post_json_with_retry

logger = logging.getLogger(__name__)

_LENGTH = struct.Struct(">I")
_HELLO = struct.Struct(">H")
_MODEL_HEADER = struct.Struct(">IH")
MODEL_FRAME_OVERHEAD = constants.LENGTH_FIELD_BYTES + 1 + _MODEL_HEADER.size


@dataclass(frozen=True)
class Hello:
    node_id: int


@dataclass(frozen=True)
class Model:
    round: int
    node_id: int
    payload: bytes


@dataclass(frozen=True)
class Bye:
    pass


def model_frame_size(payload_len):
    """Bytes on the wire for one MODEL frame: 4 + 1 + 4 + 2 + payload."""
    return MODEL_FRAME_OVERHEAD + payload_len


def encode_frame(msg):
    if isinstance(msg, Hello):
        if not 0 <= msg.node_id <= 0xFFFF:
            raise ProtocolError(f"node_id {msg.node_id} does not fit in u16")
        msg_type, body = constants.MSG_HELLO, _HELLO.pack(msg.node_id)
    elif isinstance(msg, Model):
        if not 0 <= msg.node_id <= 0xFFFF:
            raise ProtocolError(f"node_id {msg.node_id} does not fit in u16")
        if not 0 <= msg.round <= 0xFFFFFFFF:
            raise ProtocolError(f"round {msg.round} does not fit in u32")
        msg_type = constants.MSG_MODEL
        body = _MODEL_HEADER.pack(msg.round, msg.node_id) + bytes(msg.payload)
    elif isinstance(msg, Bye):
        msg_type, body = constants.MSG_BYE, b""
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    length = 1 + len(body)
    if length > constants.FRAME_CAP_BYTES:
        raise OversizeFrameError(f"frame of {length} bytes exceeds the 16 MiB cap")
    return _LENGTH.pack(length) + bytes([msg_type]) + body


def _read_exact(stream, n, started):
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    data = b"".join(chunks)
    if len(data) < n:
        if not started and not data:
            raise PeerClosedError("stream closed on a frame boundary")
        raise FrameTruncatedError(f"short read: wanted {n} bytes, got {len(data)}")
    return data


def _decode_body(msg_type, body):
    if msg_type == constants.MSG_HELLO:
        if len(body) != _HELLO.size:
            raise ProtocolError(f"HELLO body must be 2 bytes, got {len(body)}")
        return Hello(node_id=_HELLO.unpack(body)[0])
    if msg_type == constants.MSG_MODEL:
        if len(body) < _MODEL_HEADER.size:
            raise ProtocolError(f"MODEL body of {len(body)} bytes has no header")
        round_index, node_id = _MODEL_HEADER.unpack_from(body)
        return Model(round=round_index, node_id=node_id, payload=body[_MODEL_HEADER.size :])
    if msg_type == constants.MSG_BYE:
        if body:
            raise ProtocolError("BYE carries no payload")
        return Bye()
    raise UnknownMessageTypeError(f"unknown message type 0x{msg_type:02x}")


def read_frame(stream):
    """
    Reads exactly one frame from a binary stream (anything with read(n));
    returns (message, bytes consumed including the length field).
    Raises PeerClosedError if the stream ends before the first byte.
    """
    (length,) = _LENGTH.unpack(_read_exact(stream, _LENGTH.size, started=False))
    if length < 1:
        raise ProtocolError("frame length 0 leaves no room for a message type")
    if length > constants.FRAME_CAP_BYTES:
        raise OversizeFrameError(f"declared frame length {length} exceeds the 16 MiB cap")
    rest = _read_exact(stream, length, started=True)
    return _decode_body(rest[0], rest[1:]), _LENGTH.size + length


def decode_frame(stream):
    return read_frame(stream)[0]


def decode_frame_bytes(data):
    """Decodes the frame at the start of `data`; returns (message, bytes consumed)."""
    if len(data) < _LENGTH.size:
        if not data:
            raise PeerClosedError("empty buffer")
        raise FrameTruncatedError("buffer shorter than the length field")
    (length,) = _LENGTH.unpack_from(data)
    if length < 1:
        raise ProtocolError("frame length 0 leaves no room for a message type")
    if length > constants.FRAME_CAP_BYTES:
        raise OversizeFrameError(f"declared frame length {length} exceeds the 16 MiB cap")
    end = _LENGTH.size + length
    if len(data) < end:
        raise FrameTruncatedError(f"frame needs {end} bytes, buffer has {len(data)}")
    return _decode_body(data[_LENGTH.size], bytes(data[_LENGTH.size + 1 : end])), end


def post_metrics(endpoint, report):
    """POST /metrics with up to 2 retries. True on a 2xx acknowledgement."""
    response = post_json_with_retry(
        join_url(endpoint, "/metrics"),
        report.to_dict(),
        retries=constants.METRIC_RETRIES,
        success_message="metric report acknowledged",
        error_message="metric report failed",
    )
    return response is not None


def post_summary(endpoint, summary):
    """POST /summary with up to 5 retries. True on a 2xx acknowledgement."""
    response = post_json_with_retry(
        join_url(endpoint, "/summary"),
        summary.to_dict(),
        retries=constants.SUMMARY_RETRIES,
        success_message="node summary acknowledged",
        error_message="node summary failed",
    )
    return response is not None
