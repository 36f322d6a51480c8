"""
Length-prefixed binary framing, little-endian throughout.

    frame := u32 length | u8 msg_type | payload      (length = len(payload) + 1)
"""

import enum
import struct
from dataclasses import dataclass

import numpy as np

from core.exceptions import ProtocolError

HEADER = struct.Struct("<IB")
MAX_FRAME = 16 * 1024 * 1024


class MsgType(enum.IntEnum):
    HELLO = 1
    OBS_REQUEST = 2
    ACTION_PACKET = 3
    CHUNK_BULK = 4
    CHUNK_DONE = 5
    ERROR = 15


class ServerMode(enum.IntEnum):
    FASTER = 0
    CONSTANT = 1


def _floats(values):
    return np.asarray(values, dtype="<f4").tobytes()


def _read_floats(payload, offset, count):
    end = offset + 4 * count
    if end > len(payload):
        raise ProtocolError("truncated float array")
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float64), end


def _unpack(fmt, payload, offset):
    size = struct.calcsize(fmt)
    if offset + size > len(payload):
        raise ProtocolError(f"truncated field at offset {offset}")
    return struct.unpack_from(fmt, payload, offset), offset + size


@dataclass
class Hello:
    H: int
    A: int
    O: int
    N: int
    mode: ServerMode

    msg_type = MsgType.HELLO
    _layout = struct.Struct("<HHHBB")

    def pack(self):
        return self._layout.pack(self.H, self.A, self.O, self.N, int(self.mode))

    @classmethod
    def unpack(cls, payload):
        if len(payload) != cls._layout.size:
            raise ProtocolError("HELLO payload has the wrong size")
        H, A, O, N, mode = cls._layout.unpack(payload)
        try:
            return cls(H, A, O, N, ServerMode(mode))
        except ValueError:
            raise ProtocolError(f"unknown server mode {mode}") from None


@dataclass
class ObsRequest:
    chunk_id: int
    obs: np.ndarray
    d: int
    s: int
    prefix: np.ndarray
    sent_us: int

    msg_type = MsgType.OBS_REQUEST

    def pack(self):
        obs = np.asarray(self.obs).ravel()
        prefix = np.asarray(self.prefix).reshape(self.d, -1) if self.d else np.zeros((0, 0))
        return b"".join(
            [
                struct.pack("<IH", self.chunk_id, obs.size),
                _floats(obs),
                struct.pack("<HH", self.d, self.s),
                _floats(prefix),
                struct.pack("<Q", self.sent_us),
            ]
        )

    @classmethod
    def unpack(cls, payload):
        (chunk_id, obs_dim), offset = _unpack("<IH", payload, 0)
        obs, offset = _read_floats(payload, offset, obs_dim)
        (d, s), offset = _unpack("<HH", payload, offset)
        remaining = len(payload) - offset - 8
        if remaining < 0:
            raise ProtocolError("truncated OBS_REQUEST")
        if d == 0:
            if remaining:
                raise ProtocolError("prefix bytes without a prefix length")
            prefix = np.zeros((0, 0))
        else:
            if remaining % (4 * d):
                raise ProtocolError("prefix size is not a multiple of d")
            count = remaining // 4
            flat, offset = _read_floats(payload, offset, count)
            prefix = flat.reshape(d, count // d)
        (sent_us,), offset = _unpack("<Q", payload, offset)
        return cls(chunk_id, obs, d, s, prefix, sent_us)


@dataclass
class ActionPacket:
    chunk_id: int
    index: int
    action: np.ndarray
    step: int
    server_us: int

    msg_type = MsgType.ACTION_PACKET

    def pack(self):
        return b"".join(
            [
                struct.pack("<IH", self.chunk_id, self.index),
                _floats(np.asarray(self.action).ravel()),
                struct.pack("<BQ", self.step, self.server_us),
            ]
        )

    @classmethod
    def unpack(cls, payload):
        (chunk_id, index), offset = _unpack("<IH", payload, 0)
        remaining = len(payload) - offset - 9
        if remaining < 0 or remaining % 4:
            raise ProtocolError("malformed ACTION_PACKET")
        action, offset = _read_floats(payload, offset, remaining // 4)
        (step, server_us), _ = _unpack("<BQ", payload, offset)
        return cls(chunk_id, index, action, step, server_us)


@dataclass
class ChunkBulk:
    chunk_id: int
    chunk: np.ndarray
    steps_used: int
    server_us: int

    msg_type = MsgType.CHUNK_BULK

    def pack(self):
        H, A = self.chunk.shape
        return struct.pack("<IHH", self.chunk_id, H, A) + _floats(self.chunk) + struct.pack(
            "<BQ", self.steps_used, self.server_us
        )

    @classmethod
    def unpack(cls, payload):
        (chunk_id, H, A), offset = _unpack("<IHH", payload, 0)
        flat, offset = _read_floats(payload, offset, H * A)
        (steps_used, server_us), offset = _unpack("<BQ", payload, offset)
        if offset != len(payload):
            raise ProtocolError("trailing bytes after CHUNK_BULK")
        return cls(chunk_id, flat.reshape(H, A), steps_used, server_us)


@dataclass
class ChunkDone:
    chunk_id: int
    steps_used: int
    early_stopped: bool

    msg_type = MsgType.CHUNK_DONE
    _layout = struct.Struct("<IBB")

    def pack(self):
        return self._layout.pack(self.chunk_id, self.steps_used, int(self.early_stopped))

    @classmethod
    def unpack(cls, payload):
        if len(payload) != cls._layout.size:
            raise ProtocolError("CHUNK_DONE payload has the wrong size")
        chunk_id, steps_used, flag = cls._layout.unpack(payload)
        return cls(chunk_id, steps_used, bool(flag))


@dataclass
class ErrorMessage:
    message: str

    msg_type = MsgType.ERROR

    def pack(self):
        return self.message.encode("utf-8")

    @classmethod
    def unpack(cls, payload):
        return cls(payload.decode("utf-8", errors="replace"))


MESSAGES = {cls.msg_type: cls for cls in (Hello, ObsRequest, ActionPacket, ChunkBulk, ChunkDone, ErrorMessage)}


def encode_frame(msg_type, payload):
    if not payload:
        raise ProtocolError("frames must carry a payload")
    return HEADER.pack(len(payload) + 1, int(msg_type)) + payload


def encode(message):
    return encode_frame(message.msg_type, message.pack())


def _check_header(length, msg_type):
    if length < 2:
        raise ProtocolError("empty frame payload")
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds the limit")
    if msg_type not in MESSAGES:
        raise ProtocolError(f"unknown message type {msg_type}")


def parse_payload(msg_type, payload):
    return MESSAGES[MsgType(msg_type)].unpack(payload)


def decode(data):
    """Decode exactly one complete frame."""
    if len(data) < HEADER.size:
        raise ProtocolError("truncated frame header")
    length, msg_type = HEADER.unpack_from(data)
    _check_header(length, msg_type)
    if len(data) != 4 + length:
        raise ProtocolError(f"length field says {length} but frame carries {len(data) - 4}")
    return parse_payload(msg_type, bytes(data[HEADER.size :]))


class FrameReader:
    """Incremental parser: feed arbitrary byte fragments, get whole messages."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data):
        self._buffer.extend(data)
        messages = []
        while len(self._buffer) >= HEADER.size:
            length, msg_type = HEADER.unpack_from(self._buffer)
            _check_header(length, msg_type)
            if len(self._buffer) < 4 + length:
                break
            payload = bytes(self._buffer[HEADER.size : 4 + length])
            del self._buffer[: 4 + length]
            messages.append(parse_payload(msg_type, payload))
        return messages

    @property
    def pending(self):
        return len(self._buffer)


def read_message(sock, reader, pending):
    """Block until one message is available on `sock`; None on clean EOF."""
    while not pending:
        data = sock.recv(65536)
        if not data:
            if reader.pending:
                raise ProtocolError("connection closed mid-frame")
            return None
        pending.extend(reader.feed(data))
    return pending.pop(0)
