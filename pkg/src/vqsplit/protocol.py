"""Request/reply message bodies exchanged between the two roles.

The transport (channel module) frames raw byte messages; this module
defines what goes inside them. A request is exactly one token packet.
A reply is a status byte followed by either the classification result
or an error string. An empty request asks the server to stop serving
the connection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

STATUS_OK = 0
STATUS_ERROR = 1

SHUTDOWN = b""  # zero-length request; a real packet is never empty

_U32 = struct.Struct("<I")


class ReplyFormatError(ValueError):
    """Reply bytes do not parse."""


class RemoteError(RuntimeError):
    """The serving side reported a structured failure."""


@dataclass(frozen=True)
class ClassReply:
    label: int
    label_name: str
    logits: np.ndarray  # float32, one score per class


def encode_ok(label: int, label_name: str, logits: np.ndarray) -> bytes:
    name = label_name.encode("utf-8")
    data = np.asarray(logits, dtype="<f4")
    return (bytes([STATUS_OK]) + _U32.pack(label)
            + _U32.pack(len(name)) + name
            + _U32.pack(data.size) + data.tobytes())


def encode_error(message: str) -> bytes:
    raw = message.encode("utf-8")
    return bytes([STATUS_ERROR]) + _U32.pack(len(raw)) + raw


def decode_reply(payload: bytes) -> ClassReply:
    """Parse a reply, raising RemoteError for a server-reported failure."""
    if len(payload) < 1:
        raise ReplyFormatError("empty reply")
    status = payload[0]
    body = payload[1:]
    if status == STATUS_ERROR:
        if len(body) < 4:
            raise ReplyFormatError("truncated error reply")
        (n,) = _U32.unpack(body[:4])
        raise RemoteError(body[4:4 + n].decode("utf-8", "replace"))
    if status != STATUS_OK:
        raise ReplyFormatError(f"unknown reply status {status}")
    try:
        (label,) = _U32.unpack(body[:4])
        (name_len,) = _U32.unpack(body[4:8])
        name = body[8:8 + name_len].decode("utf-8")
        off = 8 + name_len
        (count,) = _U32.unpack(body[off:off + 4])
        raw = body[off + 4:off + 4 + count * 4]
        if len(raw) != count * 4:
            raise ReplyFormatError("truncated logits")
        logits = np.frombuffer(raw, dtype="<f4").copy()
        if off + 4 + count * 4 != len(body):
            raise ReplyFormatError("trailing bytes in reply")
    except struct.error as exc:
        raise ReplyFormatError(f"malformed reply: {exc}") from exc
    return ClassReply(label=int(label), label_name=name, logits=logits)
