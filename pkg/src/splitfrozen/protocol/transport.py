"""Frame transports: in-process loopback and byte-stream sockets.

Both carry whole frames produced by :mod:`.wire`. A
:class:`RecordingTransport` wraps either and appends every sent frame to a
log (``LOG_MAGIC`` followed by the raw frames) that :func:`replay_frames`
reads back.
"""

from __future__ import annotations

import queue
import socket
from typing import BinaryIO, Iterator

from .wire import HEADER, WireError, parse_header, split_frames

LOG_MAGIC = b"SPFZLOG1"


class Transport:
    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> bytes | None:
        """Next frame, or ``None`` once the peer has closed."""
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackTransport(Transport):
    def __init__(self):
        self._q: queue.Queue = queue.Queue()

    def send(self, frame: bytes) -> None:
        self._q.put(bytes(frame))

    def recv(self, timeout: float | None = None) -> bytes | None:
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._q.put(None)


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def _read_exact(self, n: int) -> bytes | None:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(n - got)
            if not chunk:
                if got:
                    raise WireError("connection closed mid-frame")
                return None
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> bytes | None:
        self.sock.settimeout(timeout)
        header = self._read_exact(HEADER.size)
        if header is None:
            return None
        _, body_len = parse_header(header)
        body = self._read_exact(body_len) if body_len else b""
        if body is None:
            raise WireError("connection closed mid-frame")
        return header + body

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


def socket_pair() -> tuple[SocketTransport, SocketTransport]:
    a, b = socket.socketpair()
    return SocketTransport(a), SocketTransport(b)


class RecordingTransport(Transport):
    def __init__(self, inner: Transport, log: BinaryIO):
        self.inner = inner
        self.log = log
        self.log.write(LOG_MAGIC)

    def send(self, frame: bytes) -> None:
        self.log.write(frame)
        self.inner.send(frame)

    def recv(self, timeout: float | None = None) -> bytes | None:
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.log.flush()
        self.inner.close()


def replay_frames(data: bytes) -> Iterator[bytes]:
    if data[:len(LOG_MAGIC)] != LOG_MAGIC:
        raise WireError("not a frame log")
    yield from split_frames(data[len(LOG_MAGIC):])
