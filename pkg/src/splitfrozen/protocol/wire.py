"""Binary frame encoding for device/server messages.

Frame = 16-byte header + body. Header, big-endian::

    magic     4s   b"SPFZ"
    version   u16  WIRE_VERSION
    msg_type  u16  MSG_REGISTER | MSG_ACTIVATION | MSG_ROUND_END
    flags     u16  0 (reserved)
    reserved  u16  0
    body_len  u32

Integers in bodies are big-endian; activation payloads are little-endian
IEEE floats (``DTYPE_F32`` by default, ``DTYPE_F64`` on request). The full
layout is in ``docs/FORMATS.md``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SPFZ"
WIRE_VERSION = 1
HEADER = struct.Struct(">4sHHHHI")
assert HEADER.size == 16

MSG_REGISTER = 1
MSG_ACTIVATION = 2
MSG_ROUND_END = 3

DTYPE_F32 = 1
DTYPE_F64 = 2
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}

_REGISTER = struct.Struct(">II")
_ACT_FIXED = struct.Struct(">IIIIIIIBI")  # dev, round, batch, layer, b, s, w, dtype, payload_len
_ROUND_END = struct.Struct(">II")


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class RegisterMsg:
    device_id: int
    assigned_layers: int


@dataclass(frozen=True)
class RoundEndMsg:
    device_id: int
    round: int


@dataclass(frozen=True, eq=False)
class ActivationBatch:
    device_id: int
    round: int
    batch_id: int
    produced_at_layer: int
    shape: tuple[int, int, int]  # (batch, seq, width)
    payload: bytes
    labels: tuple[int, ...]
    sample_ids: tuple[int, ...]
    dtype: int = DTYPE_F32

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise WireError(f"unknown dtype code {self.dtype}")
        b, s, w = self.shape
        expected = b * s * w * _DTYPES[self.dtype].itemsize
        if len(self.payload) != expected:
            raise WireError(f"payload is {len(self.payload)} bytes, shape {self.shape} needs {expected}")
        if len(self.labels) != b or len(self.sample_ids) != b:
            raise WireError("labels and sample_ids must have one entry per sample")

    @classmethod
    def from_array(cls, acts: np.ndarray, *, device_id: int, round: int, batch_id: int,
                   produced_at_layer: int, seq_len: int, labels, sample_ids,
                   dtype: int = DTYPE_F32) -> ActivationBatch:
        rows, width = acts.shape
        payload = np.ascontiguousarray(acts, dtype=_DTYPES[dtype]).tobytes()
        return cls(device_id, round, batch_id, produced_at_layer, (rows // seq_len, seq_len, width),
                   payload, tuple(int(l) for l in labels), tuple(int(s) for s in sample_ids), dtype)

    def activations(self) -> np.ndarray:
        """Payload as float64 rows of shape ``(batch * seq, width)``."""
        b, s, w = self.shape
        return np.frombuffer(self.payload, dtype=_DTYPES[self.dtype]).astype(np.float64).reshape(b * s, w)

    def __eq__(self, other):
        if not isinstance(other, ActivationBatch):
            return NotImplemented
        return (self.device_id, self.round, self.batch_id, self.produced_at_layer, self.shape,
                self.payload, self.labels, self.sample_ids, self.dtype) == (
                other.device_id, other.round, other.batch_id, other.produced_at_layer, other.shape,
                other.payload, other.labels, other.sample_ids, other.dtype)


Message = RegisterMsg | ActivationBatch | RoundEndMsg


def _frame(msg_type: int, body: bytes) -> bytes:
    return HEADER.pack(MAGIC, WIRE_VERSION, msg_type, 0, 0, len(body)) + body


def encode(msg: Message) -> bytes:
    if isinstance(msg, RegisterMsg):
        return _frame(MSG_REGISTER, _REGISTER.pack(msg.device_id, msg.assigned_layers))
    if isinstance(msg, RoundEndMsg):
        return _frame(MSG_ROUND_END, _ROUND_END.pack(msg.device_id, msg.round))
    if isinstance(msg, ActivationBatch):
        b, s, w = msg.shape
        body = (_ACT_FIXED.pack(msg.device_id, msg.round, msg.batch_id, msg.produced_at_layer,
                                b, s, w, msg.dtype, len(msg.payload))
                + msg.payload
                + struct.pack(f">{b}i", *msg.labels)
                + struct.pack(f">{b}Q", *msg.sample_ids))
        return _frame(MSG_ACTIVATION, body)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def parse_header(header: bytes) -> tuple[int, int]:
    """Return ``(msg_type, body_len)``; raises on bad magic or version."""
    if len(header) != HEADER.size:
        raise WireError(f"short header ({len(header)} bytes)")
    magic, version, msg_type, _flags, _reserved, body_len = HEADER.unpack(header)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise WireError(f"unsupported wire version {version}")
    return msg_type, body_len


def decode(frame: bytes) -> Message:
    msg_type, body_len = parse_header(frame[:HEADER.size])
    body = frame[HEADER.size:]
    if len(body) != body_len:
        raise WireError(f"body is {len(body)} bytes, header says {body_len}")
    if msg_type == MSG_REGISTER:
        return RegisterMsg(*_REGISTER.unpack(body))
    if msg_type == MSG_ROUND_END:
        return RoundEndMsg(*_ROUND_END.unpack(body))
    if msg_type == MSG_ACTIVATION:
        dev, rnd, bid, layer, b, s, w, dtype, plen = _ACT_FIXED.unpack_from(body)
        off = _ACT_FIXED.size
        payload = body[off:off + plen]
        off += plen
        labels = struct.unpack_from(f">{b}i", body, off)
        off += 4 * b
        sample_ids = struct.unpack_from(f">{b}Q", body, off)
        off += 8 * b
        if off != len(body):
            raise WireError("trailing bytes in activation body")
        return ActivationBatch(dev, rnd, bid, layer, (b, s, w), payload, labels, sample_ids, dtype)
    raise WireError(f"unknown message type {msg_type}")


def split_frames(data: bytes) -> list[bytes]:
    """Cut a concatenation of frames into individual frames."""
    frames, off = [], 0
    while off < len(data):
        _, body_len = parse_header(data[off:off + HEADER.size])
        end = off + HEADER.size + body_len
        if end > len(data):
            raise WireError("truncated frame")
        frames.append(data[off:end])
        off = end
    return frames
