"""TLS record framing and the handful of handshake fields needed for key matching."""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

from .crypto import EXPLICIT_NONCE_LEN, RANDOM_LEN, TAG_LEN

log = logging.getLogger(__name__)

MAX_RECORD_LEN = 2**14 + 2048
RECORD_HEADER_LEN = 5
AEAD_OVERHEAD = EXPLICIT_NONCE_LEN + TAG_LEN

HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2

TLS12 = 0x0303
_EXT_SUPPORTED_VERSIONS = 43


class ContentType(enum.IntEnum):
    CHANGE_CIPHER_SPEC = 20
    ALERT = 21
    HANDSHAKE = 22
    APPLICATION_DATA = 23


class ParseError(ValueError):
    pass


class MalformedRecord(ParseError):
    pass


class NonTlsStream(ParseError):
    """The byte stream does not start with (or lost sync with) TLS framing."""


@dataclass(frozen=True)
class TlsRecord:
    content_type: int
    legacy_version: bytes
    payload: bytes
    capture_time: int

    def __post_init__(self) -> None:
        if len(self.payload) > MAX_RECORD_LEN:
            raise MalformedRecord(f"record length {len(self.payload)} exceeds {MAX_RECORD_LEN}")

    @property
    def header(self) -> bytes:
        return struct.pack("!B2sH", self.content_type, self.legacy_version, len(self.payload))


@dataclass(frozen=True)
class AeadRecordParts:
    explicit_nonce: bytes
    ciphertext: bytes
    tag: bytes


@dataclass
class HandshakeSummary:
    client_random: bytes | None = None
    server_random: bytes | None = None
    cipher_suite: int | None = None
    session_id: bytes = b""
    server_session_id: bytes = b""
    offered_suites: tuple[int, ...] = ()
    negotiated_version: int | None = None

    @property
    def is_tls12(self) -> bool:
        return self.negotiated_version == TLS12

    @property
    def resumed(self) -> bool:
        """Abbreviated handshake: the server echoed the client's session ID."""
        return bool(self.session_id) and self.session_id == self.server_session_id

    def merge_server_hello(self, other: "HandshakeSummary") -> None:
        if self.cipher_suite is not None and self.cipher_suite != other.cipher_suite:
            raise ParseError("cipher suite already fixed for this connection")
        self.server_random = other.server_random
        self.cipher_suite = other.cipher_suite
        self.server_session_id = other.server_session_id
        self.negotiated_version = other.negotiated_version


def _plausible_header(header: bytes) -> bool:
    ctype, major, _minor, length = struct.unpack("!BBBH", header)
    return ctype in ContentType._value2member_map_ and major == 3 and length <= MAX_RECORD_LEN


class RecordParser:
    """Incremental record framer for one direction of a connection.

    Feed it stream bytes as they are reassembled; complete records come
    back with the capture time of the chunk that completed them.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self.is_tls = True
        self.records = 0

    def feed(self, data: bytes, capture_time: int) -> list[TlsRecord]:
        if not self.is_tls:
            return []
        self._buf += data
        out: list[TlsRecord] = []
        buf = self._buf
        pos = 0
        while len(buf) - pos >= RECORD_HEADER_LEN:
            header = bytes(buf[pos : pos + RECORD_HEADER_LEN])
            if not _plausible_header(header):
                self.is_tls = False
                self._buf = bytearray()
                raise NonTlsStream(f"implausible record header {header.hex()} after {self.records} records")
            length = int.from_bytes(header[3:5], "big")
            end = pos + RECORD_HEADER_LEN + length
            if end > len(buf):
                break
            out.append(TlsRecord(header[0], header[1:3], bytes(buf[pos + RECORD_HEADER_LEN : end]), capture_time))
            pos = end
        del buf[:pos]
        self.records += len(out)
        return out

    def close(self) -> int:
        """Discard any trailing partial record and return its size."""
        leftover = len(self._buf)
        if leftover and self.is_tls:
            log.debug("discarding %d bytes of trailing partial record", leftover)
        self._buf = bytearray()
        return leftover


def parse_records(stream: Iterable[tuple[bytes, int]]) -> Iterator[TlsRecord]:
    """Frame records from ``(bytes, capture_time)`` pieces of one direction.

    Raises :class:`NonTlsStream` once the stream stops looking like TLS.
    """
    parser = RecordParser()
    for data, ts in stream:
        yield from parser.feed(data, ts)
    parser.close()


class HandshakeBuffer:
    """Reassembles handshake messages that span or share plaintext records."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, payload: bytes) -> list[tuple[int, bytes]]:
        self._buf += payload
        msgs = []
        while len(self._buf) >= 4:
            length = int.from_bytes(self._buf[1:4], "big")
            if len(self._buf) < 4 + length:
                break
            msg = bytes(self._buf[: 4 + length])
            del self._buf[: 4 + length]
            msgs.append((msg[0], msg))
        return msgs


class _Reader:
    def __init__(self, data: bytes, what: str) -> None:
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated {self.what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def vector(self, len_bytes: int) -> bytes:
        return self.take(int.from_bytes(self.take(len_bytes), "big"))

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _hello_body(message: bytes, expected_type: int, what: str) -> _Reader:
    if len(message) < 4:
        raise ParseError(f"truncated {what}")
    if message[0] != expected_type:
        raise ParseError(f"expected {what} (type {expected_type}), got type {message[0]}")
    length = int.from_bytes(message[1:4], "big")
    if len(message) < 4 + length:
        raise ParseError(f"truncated {what}")
    return _Reader(message[4 : 4 + length], what)


def parse_client_hello(message: bytes) -> HandshakeSummary:
    """Extract the client random, session ID and offered suites.

    ``message`` is a complete handshake message starting at the type byte;
    the client random therefore sits at bytes 6..38.
    """
    r = _hello_body(message, HS_CLIENT_HELLO, "ClientHello")
    r.u16()
    client_random = r.take(RANDOM_LEN)
    session_id = r.vector(1)
    if len(session_id) > 32:
        raise ParseError("ClientHello session ID longer than 32 bytes")
    raw_suites = r.vector(2)
    suites = tuple(int.from_bytes(raw_suites[i : i + 2], "big") for i in range(0, len(raw_suites) - 1, 2))
    return HandshakeSummary(client_random=client_random, session_id=session_id, offered_suites=suites)


def parse_server_hello(message: bytes) -> HandshakeSummary:
    r = _hello_body(message, HS_SERVER_HELLO, "ServerHello")
    version = r.u16()
    server_random = r.take(RANDOM_LEN)
    session_id = r.vector(1)
    suite = r.u16()
    r.u8()  # compression method
    if r.remaining() >= 2:
        extensions = _Reader(r.vector(2), "ServerHello extensions")
        while extensions.remaining():
            ext_type = extensions.u16()
            body = extensions.vector(2)
            if ext_type == _EXT_SUPPORTED_VERSIONS and len(body) == 2:
                version = int.from_bytes(body, "big")
    return HandshakeSummary(
        server_random=server_random,
        cipher_suite=suite,
        server_session_id=session_id,
        negotiated_version=version,
    )


def split_aead_record(record: TlsRecord) -> AeadRecordParts:
    payload = record.payload
    if len(payload) < AEAD_OVERHEAD:
        raise MalformedRecord(f"GCM record payload of {len(payload)} bytes is shorter than {AEAD_OVERHEAD}")
    return AeadRecordParts(
        explicit_nonce=payload[:EXPLICIT_NONCE_LEN],
        ciphertext=payload[EXPLICIT_NONCE_LEN:-TAG_LEN],
        tag=payload[-TAG_LEN:],
    )
