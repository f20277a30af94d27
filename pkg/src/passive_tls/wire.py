"""Binary framing for key material sent from endpoints to the monitor.

Layout (big-endian)::

    version:u8 (=1) | kind:u8 | client_random:32 | secret_len:u16 | secret | sent_time:u64 (us)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .crypto import RANDOM_LEN
from .keystore import KeyKind, KeyLogEntry

WIRE_VERSION = 1
_HEAD = struct.Struct("!BB32sH")
_TAIL = struct.Struct("!Q")
HEADER_LEN = _HEAD.size


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class KeyMessage:
    kind: KeyKind
    client_random: bytes
    secret: bytes
    sent_time: int

    def __post_init__(self) -> None:
        if len(self.client_random) != RANDOM_LEN:
            raise FrameError("client random must be 32 bytes")
        if not 1 <= len(self.secret) <= 0xFFFF:
            raise FrameError("secret length must be in 1..65535")
        if not 0 <= self.sent_time < 1 << 64:
            raise FrameError("sent_time out of range")

    @classmethod
    def from_entry(cls, entry: KeyLogEntry, sent_time: int) -> "KeyMessage":
        return cls(entry.kind, entry.client_random, entry.secret, sent_time)

    def to_entry(self, arrival_time: int) -> KeyLogEntry:
        return KeyLogEntry(self.kind, self.client_random, self.secret, arrival_time)

    def encode(self) -> bytes:
        return (
            _HEAD.pack(WIRE_VERSION, int(self.kind), self.client_random, len(self.secret))
            + self.secret
            + _TAIL.pack(self.sent_time)
        )


def body_length(header: bytes) -> int:
    """Bytes that follow a 36-byte header: the secret plus the timestamp."""
    version, kind, _, secret_len = _HEAD.unpack(header)
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported wire version {version}")
    if kind not in KeyKind._value2member_map_:
        raise FrameError(f"unknown key kind {kind}")
    if secret_len == 0:
        raise FrameError("empty secret")
    return secret_len + _TAIL.size


def decode(frame: bytes) -> KeyMessage:
    if len(frame) < HEADER_LEN:
        raise FrameError("truncated header")
    need = body_length(frame[:HEADER_LEN])
    if len(frame) != HEADER_LEN + need:
        raise FrameError(f"frame length {len(frame)} does not match header ({HEADER_LEN + need})")
    _, kind, client_random, secret_len = _HEAD.unpack(frame[:HEADER_LEN])
    secret = frame[HEADER_LEN : HEADER_LEN + secret_len]
    (sent_time,) = _TAIL.unpack(frame[HEADER_LEN + secret_len :])
    try:
        return KeyMessage(KeyKind(kind), client_random, secret, sent_time)
    except ValueError as exc:
        raise FrameError(str(exc)) from exc


class FrameDecoder:
    """Splits a byte stream into KeyMessages."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[KeyMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_LEN:
            total = HEADER_LEN + body_length(bytes(self._buf[:HEADER_LEN]))
            if len(self._buf) < total:
                break
            out.append(decode(bytes(self._buf[:total])))
            del self._buf[:total]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
