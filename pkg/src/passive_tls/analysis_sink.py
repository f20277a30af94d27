"""Destination for decrypted plaintext: protocol identification and logging."""

from __future__ import annotations

import enum
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, TextIO

from .flows import Direction, FlowKey

HTTP2_PREFACE = b"PRI * HTTP/2.0\r\n\r\nSM\r\n\r\n"
HTTP1_METHODS = (b"GET", b"HEAD", b"POST", b"PUT", b"DELETE", b"CONNECT", b"OPTIONS", b"TRACE", b"PATCH")

LOG_FIELDS = (
    "ts",
    "src_ip",
    "src_port",
    "dst_ip",
    "dst_port",
    "direction",
    "protocol",
    "offset",
    "length",
    "gap",
)


class Protocol(enum.Enum):
    HTTP1 = "HTTP1"
    HTTP2 = "HTTP2"
    UNKNOWN = "Unknown"


def detect_protocol(first_bytes: bytes, gap: bool = False) -> Protocol:
    """Classify a decrypted client stream from its first bytes.

    A stream joined mid-connection is never classified.
    """
    if gap or not first_bytes:
        return Protocol.UNKNOWN
    if first_bytes.startswith(HTTP2_PREFACE):
        return Protocol.HTTP2
    for method in HTTP1_METHODS:
        if first_bytes.startswith(method + b" "):
            return Protocol.HTTP1
    return Protocol.UNKNOWN


@dataclass(frozen=True)
class CleartextEvent:
    flow: FlowKey
    direction: Direction
    offset: int
    data: bytes
    capture_time: int
    detected_protocol: Protocol = Protocol.UNKNOWN
    gap: bool = False
    conn_id: int = 0


def format_event(event: CleartextEvent) -> str:
    f = event.flow
    return "\t".join(
        (
            f"{event.capture_time // 1_000_000}.{event.capture_time % 1_000_000:06d}",
            str(f.src_ip),
            str(f.src_port),
            str(f.dst_ip),
            str(f.dst_port),
            event.direction.value,
            event.detected_protocol.value,
            str(event.offset),
            str(len(event.data)),
            "T" if event.gap else "F",
        )
    )


class AnalysisSink:
    """Collects cleartext from the engine, one instance per run.

    ``log`` may be a path or an open text stream; ``dump_dir`` enables
    per-connection raw payload files named ``<flow>-<direction>.bin``.
    Writes are serialized, so flows may be fed from several threads.
    """

    def __init__(self, log: str | os.PathLike | TextIO | None = None, dump_dir: str | os.PathLike | None = None):
        self._lock = threading.Lock()
        self._own_log = isinstance(log, (str, os.PathLike))
        self._log: TextIO | None = open(log, "w", encoding="utf-8") if self._own_log else log  # type: ignore[arg-type]
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
        self._dumps: dict[tuple[int, Direction], BinaryIO] = {}
        self._protocols: dict[int, Protocol] = {}
        self.events = 0
        self.bytes = 0
        if self._log is not None:
            self._log.write("#fields\t" + "\t".join(LOG_FIELDS) + "\n")

    def handle(
        self,
        flow: FlowKey,
        direction: Direction,
        offset: int,
        data: bytes,
        capture_time: int,
        gap: bool = False,
        conn_id: int = 0,
    ) -> CleartextEvent:
        with self._lock:
            protocol = self._protocols.get(conn_id)
            if protocol is None and direction is Direction.CLIENT_TO_SERVER:
                protocol = detect_protocol(data, gap)
                self._protocols[conn_id] = protocol
            event = CleartextEvent(
                flow, direction, offset, data, capture_time, protocol or Protocol.UNKNOWN, gap, conn_id
            )
            self._emit(event)
            return event

    def emit_log(self, event: CleartextEvent) -> None:
        with self._lock:
            self._emit(event)

    def _emit(self, event: CleartextEvent) -> None:
        self.events += 1
        self.bytes += len(event.data)
        if self._log is not None:
            self._log.write(format_event(event) + "\n")
        if self.dump_dir is not None:
            key = (event.conn_id, event.direction)
            fh = self._dumps.get(key)
            if fh is None:
                fh = open(self.dump_dir / f"{event.flow.slug()}-{event.direction.value}.bin", "ab")
                self._dumps[key] = fh
            fh.write(event.data)

    def protocol_of(self, conn_id: int) -> Protocol:
        return self._protocols.get(conn_id, Protocol.UNKNOWN)

    def close(self) -> None:
        with self._lock:
            for fh in self._dumps.values():
                fh.close()
            self._dumps.clear()
            if self._log is not None:
                if self._own_log:
                    self._log.close()
                else:
                    self._log.flush()

    def __enter__(self) -> "AnalysisSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
