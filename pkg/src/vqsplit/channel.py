"""Reliable ordered byte-message transport between the two roles.

Both transports carry the same framed contract: each message is a u32
little-endian length followed by that many bytes. The queue transport
runs both roles in one process; the socket transport runs them across a
localhost TCP connection with identical semantics.
"""

from __future__ import annotations

import queue
import socket
import struct
from typing import Protocol

_LEN = struct.Struct("<I")
MAX_MESSAGE = 1 << 28  # sanity cap on a single frame


class ChannelClosed(ConnectionError):
    """Peer closed the transport before or during a message."""


class ChannelProtocolError(RuntimeError):
    """Framing violated: oversized or malformed length prefix."""


class Channel(Protocol):
    def send(self, payload: bytes) -> None: ...
    def recv(self, timeout: float | None = None) -> bytes: ...
    def close(self) -> None: ...


_CLOSE = object()


class QueueChannel:
    """One endpoint of an in-process duplex pair."""

    def __init__(self, inbox: "queue.Queue", outbox: "queue.Queue"):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, payload: bytes) -> None:
        if self._closed:
            raise ChannelClosed("send on closed channel")
        if len(payload) > MAX_MESSAGE:
            raise ChannelProtocolError(f"message of {len(payload)} bytes exceeds cap")
        self._outbox.put(bytes(payload))

    def recv(self, timeout: float | None = None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelClosed("recv timed out") from None
        if item is _CLOSE:
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSE)


def queue_pair() -> tuple[QueueChannel, QueueChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return (QueueChannel(inbox=b_to_a, outbox=a_to_b),
            QueueChannel(inbox=a_to_b, outbox=b_to_a))


class SocketChannel:
    """Framed messages over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                raise ChannelClosed(
                    f"connection closed with {remaining} of {n} bytes pending")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def send(self, payload: bytes) -> None:
        if len(payload) > MAX_MESSAGE:
            raise ChannelProtocolError(f"message of {len(payload)} bytes exceeds cap")
        try:
            self._sock.sendall(_LEN.pack(len(payload)) + bytes(payload))
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv(self, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        try:
            header = self._recv_exact(_LEN.size)
            (length,) = _LEN.unpack(header)
            if length > MAX_MESSAGE:
                raise ChannelProtocolError(f"frame of {length} bytes exceeds cap")
            return self._recv_exact(length)
        except socket.timeout:
            raise ChannelClosed("recv timed out") from None
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class ChannelServer:
    """Listening endpoint that accepts one SocketChannel at a time."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.create_server((host, port))

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def accept(self, timeout: float | None = None) -> SocketChannel:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise ChannelClosed("accept timed out") from None
        conn.settimeout(None)
        return SocketChannel(conn)

    def close(self) -> None:
        self._sock.close()


def connect(host: str, port: int, timeout: float | None = 10.0) -> SocketChannel:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ChannelClosed(f"connect to {host}:{port} failed: {exc}") from exc
    sock.settimeout(None)
    return SocketChannel(sock)
