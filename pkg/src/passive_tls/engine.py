"""Per-connection decryption state machine and capture-level drivers.

Connections are matched to key material by the client random from the
ClientHello. Keys are looked up lazily at the first record that needs them,
at ``capture_time + traffic_delay``; a missing key only skips that record,
so decryption can start mid-connection once the key shows up.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from . import crypto
from .analysis_sink import AnalysisSink
from .crypto import SUITE_ECDHE_RSA_AES256_GCM_SHA384, AuthTagMismatch, SessionKeys
from .flows import Direction, FlowKey
from .keystore import KeyKind, KeyStore
from .tls_parser import (
    AEAD_OVERHEAD,
    HS_CLIENT_HELLO,
    HS_SERVER_HELLO,
    ContentType,
    HandshakeBuffer,
    HandshakeSummary,
    MalformedRecord,
    NonTlsStream,
    ParseError,
    RecordParser,
    TlsRecord,
    parse_client_hello,
    parse_server_hello,
    split_aead_record,
)
from .wire_capture import CaptureStats, Frame, Reassembler, StreamChunk, open_capture, reassemble

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    AWAITING_CLIENT_HELLO = "awaiting-client-hello"
    AWAITING_SERVER_HELLO = "awaiting-server-hello"
    AWAITING_CCS = "awaiting-ccs"
    ENCRYPTED = "encrypted"
    UNSUPPORTED = "unsupported"
    NON_TLS = "non-tls"


class EventKind(enum.Enum):
    HANDSHAKE_PROGRESS = "handshake-progress"
    PLAINTEXT = "plaintext"
    SKIPPED = "skipped"
    AUTH_FAILED = "auth-failed"


@dataclass(frozen=True)
class EngineEvent:
    kind: EventKind
    data: bytes = b""
    reason: str = ""


@dataclass
class SessionStats:
    tls_payload_bytes_total: int = 0
    tls_payload_bytes_decrypted: int = 0
    records_total: int = 0
    records_decrypted: int = 0
    records_auth_failed: int = 0
    records_missing_key: int = 0
    handshake_records_decrypted: int = 0
    encrypted_alerts: int = 0
    bytes_client_to_server: int = 0
    bytes_server_to_client: int = 0
    fully_decrypted: bool = False


@dataclass
class EngineConfig:
    """Engine knobs.

    ``traffic_delay`` (microseconds) is added to the capture time when
    checking whether a key has arrived. ``use_key_arrival=False`` ignores
    arrival times entirely (all keys preloaded). ``decrypt=False`` is the
    parse-only baseline: records are framed and counted but never decrypted.
    """

    traffic_delay: int = 0
    seq_from_nonce: bool = True
    on_missing_key: str = "skip"
    cleartext_sink: AnalysisSink | None = None
    use_key_arrival: bool = True
    decrypt: bool = True

    def __post_init__(self) -> None:
        if self.traffic_delay < 0:
            raise ValueError("traffic_delay must be >= 0")
        if self.on_missing_key != "skip":
            raise ValueError("only the 'skip' missing-key policy is supported")


@dataclass
class TlsSession:
    flow: FlowKey
    conn_id: int = 0
    summary: HandshakeSummary = field(default_factory=HandshakeSummary)
    phase: Phase = Phase.AWAITING_CLIENT_HELLO
    keys: SessionKeys | None = None
    seq_c2s: int = 0
    seq_s2c: int = 0
    first_ciphertext_time: int | None = None
    keys_attached_time: int | None = None
    stats: SessionStats = field(default_factory=SessionStats)
    unsupported_reason: str = ""
    flipped: bool = False
    ccs_seen: dict[Direction, bool] = field(default_factory=lambda: {d: False for d in Direction})
    stream_offset: dict[Direction, int] = field(default_factory=lambda: {d: 0 for d in Direction})
    stream_gap: dict[Direction, bool] = field(default_factory=lambda: {d: False for d in Direction})
    _parsers: dict[Direction, RecordParser] = field(default_factory=lambda: {d: RecordParser() for d in Direction})
    _handshake: dict[Direction, HandshakeBuffer] = field(default_factory=lambda: {d: HandshakeBuffer() for d in Direction})
    tls_records_seen: int = 0
    trailing_bytes: int = 0

    @property
    def is_tls(self) -> bool:
        return self.phase is not Phase.NON_TLS and self.tls_records_seen > 0

    def next_seq(self, direction: Direction) -> int:
        return self.seq_c2s if direction is Direction.CLIENT_TO_SERVER else self.seq_s2c

    def bump_seq(self, direction: Direction) -> None:
        if direction is Direction.CLIENT_TO_SERVER:
            self.seq_c2s += 1
        else:
            self.seq_s2c += 1


def _rate(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class RunReport:
    sessions: list[TlsSession]
    capture: CaptureStats
    config: EngineConfig

    @property
    def tls_sessions(self) -> list[TlsSession]:
        return [s for s in self.sessions if s.is_tls]

    @property
    def payload_sessions(self) -> list[TlsSession]:
        """TLS sessions carrying at least one application-data record."""
        return [s for s in self.tls_sessions if s.stats.records_total > 0]

    @property
    def non_tls(self) -> int:
        return sum(1 for s in self.sessions if s.phase is Phase.NON_TLS)

    @property
    def unsupported(self) -> int:
        return sum(1 for s in self.tls_sessions if s.phase is Phase.UNSUPPORTED)

    @property
    def without_key(self) -> int:
        return sum(1 for s in self.payload_sessions if s.phase is Phase.ENCRYPTED and s.keys is None)

    @property
    def fully_decrypted(self) -> int:
        return sum(1 for s in self.payload_sessions if s.stats.fully_decrypted)

    @property
    def bytes_total(self) -> int:
        return sum(s.stats.tls_payload_bytes_total for s in self.tls_sessions)

    @property
    def bytes_decrypted(self) -> int:
        return sum(s.stats.tls_payload_bytes_decrypted for s in self.tls_sessions)

    @property
    def connection_rate(self) -> float | None:
        return _rate(self.fully_decrypted, len(self.payload_sessions))

    @property
    def byte_rate(self) -> float | None:
        return _rate(self.bytes_decrypted, self.bytes_total)

    def summary(self) -> dict[str, object]:
        tls = self.tls_sessions
        return {
            "sessions": len(self.sessions),
            "tls_sessions": len(tls),
            "non_tls_flows": self.non_tls,
            "unsupported_sessions": self.unsupported,
            "sessions_with_payload": len(self.payload_sessions),
            "sessions_without_key": self.without_key,
            "fully_decrypted_sessions": self.fully_decrypted,
            "records_total": sum(s.stats.records_total for s in tls),
            "records_decrypted": sum(s.stats.records_decrypted for s in tls),
            "records_auth_failed": sum(s.stats.records_auth_failed for s in tls),
            "records_missing_key": sum(s.stats.records_missing_key for s in tls),
            "tls_payload_bytes_total": self.bytes_total,
            "tls_payload_bytes_decrypted": self.bytes_decrypted,
            "connection_success_rate": self.connection_rate,
            "byte_success_rate": self.byte_rate,
            "capture_frames": self.capture.frames,
            "tcp_duplicates": self.capture.duplicates,
            "tcp_conflicts": self.capture.conflicts,
            "dropped_flows": self.capture.dropped_flows,
        }


class Engine:
    def __init__(self, store: KeyStore, config: EngineConfig | None = None) -> None:
        self.store = store
        self.config = config or EngineConfig()
        self.sessions: dict[int, TlsSession] = {}

    def feed_chunk(self, chunk: StreamChunk) -> list[EngineEvent]:
        session = self.sessions.get(chunk.conn_id)
        if session is None:
            session = self.sessions[chunk.conn_id] = TlsSession(chunk.flow, chunk.conn_id)
        if session.phase is Phase.NON_TLS:
            return []
        parser = session._parsers[chunk.direction]
        try:
            records = parser.feed(chunk.data, chunk.capture_time)
        except NonTlsStream as exc:
            if session.tls_records_seen == 0:
                session.phase = Phase.NON_TLS
                log.debug("%s classified as non-TLS: %s", chunk.flow, exc)
            else:
                log.warning("%s lost TLS framing in %s direction: %s", chunk.flow, chunk.direction.value, exc)
            return []
        events = []
        for record in records:
            session.tls_records_seen += 1
            direction = chunk.direction.reverse if session.flipped else chunk.direction
            events.append(self.process_record(session, direction, record))
        return events

    def process_record(self, session: TlsSession, direction: Direction, record: TlsRecord) -> EngineEvent:
        ctype = record.content_type
        if ctype == ContentType.APPLICATION_DATA:
            return self._application_data(session, direction, record)
        if ctype == ContentType.CHANGE_CIPHER_SPEC:
            session.ccs_seen[direction] = True
            if session.phase is Phase.AWAITING_CCS:
                session.phase = Phase.ENCRYPTED
            return EngineEvent(EventKind.HANDSHAKE_PROGRESS, reason="change-cipher-spec")
        if session.ccs_seen[direction]:
            return self._encrypted_control(session, direction, record)
        if ctype == ContentType.HANDSHAKE:
            return self._handshake(session, direction, record)
        return EngineEvent(EventKind.HANDSHAKE_PROGRESS, reason="alert")

    def _handshake(self, session: TlsSession, direction: Direction, record: TlsRecord) -> EngineEvent:
        for msg_type, msg in session._handshake[direction].feed(record.payload):
            try:
                if msg_type == HS_CLIENT_HELLO and session.phase is Phase.AWAITING_CLIENT_HELLO:
                    session.summary = parse_client_hello(msg)
                    session.phase = Phase.AWAITING_SERVER_HELLO
                    if direction is Direction.SERVER_TO_CLIENT:
                        # roles were guessed wrong by the capture layer
                        session.flipped = not session.flipped
                        session.flow = session.flow.reversed()
                elif msg_type == HS_SERVER_HELLO and session.phase is Phase.AWAITING_SERVER_HELLO:
                    session.summary.merge_server_hello(parse_server_hello(msg))
                    self._check_support(session)
            except ParseError as exc:
                session.phase = Phase.UNSUPPORTED
                session.unsupported_reason = "parse-error"
                log.debug("%s handshake parse error: %s", session.flow, exc)
        return EngineEvent(EventKind.HANDSHAKE_PROGRESS, reason=session.phase.value)

    def _check_support(self, session: TlsSession) -> None:
        summary = session.summary
        if not summary.is_tls12:
            session.phase, session.unsupported_reason = Phase.UNSUPPORTED, "version"
        elif summary.cipher_suite != SUITE_ECDHE_RSA_AES256_GCM_SHA384:
            session.phase, session.unsupported_reason = Phase.UNSUPPORTED, "suite"
        elif summary.resumed:
            session.phase, session.unsupported_reason = Phase.UNSUPPORTED, "resumption"
        else:
            session.phase = Phase.AWAITING_CCS

    def try_attach_keys(self, session: TlsSession, now: int) -> bool:
        if session.keys is not None:
            return True
        if session.phase is not Phase.ENCRYPTED:
            return False
        cfg = self.config
        as_of = now + cfg.traffic_delay if cfg.use_key_arrival else None
        summary = session.summary
        entry = self.store.lookup(summary.client_random, as_of)
        if entry is None:
            return False
        if entry.kind is KeyKind.SESSION_KEYS:
            keys = SessionKeys.from_key_block(entry.secret)
        else:
            master = entry.secret
            if entry.kind is KeyKind.PRE_MASTER:
                master = crypto.derive_master_secret(entry.secret, summary.client_random, summary.server_random)
            keys = crypto.derive_session_keys(master, summary.client_random, summary.server_random)
        session.keys = keys
        session.keys_attached_time = now
        return True

    def _seq_candidates(self, session: TlsSession, direction: Direction, nonce: bytes) -> list[int]:
        nonce_seq = int.from_bytes(nonce, "big")
        if not session.ccs_seen[direction]:
            return [nonce_seq] if self.config.seq_from_nonce else [session.next_seq(direction)]
        counted = session.next_seq(direction)
        if self.config.seq_from_nonce and nonce_seq != counted:
            return [counted, nonce_seq]
        return [counted]

    def _decrypt(self, session: TlsSession, direction: Direction, record: TlsRecord) -> bytes:
        parts = split_aead_record(record)
        assert session.keys is not None
        err: AuthTagMismatch | None = None
        for seq in self._seq_candidates(session, direction, parts.explicit_nonce):
            try:
                return crypto.decrypt_record(
                    session.keys, direction, seq, parts, record.content_type, record.legacy_version
                )
            except AuthTagMismatch as exc:
                err = exc
        assert err is not None
        raise err

    def _encrypted_control(self, session: TlsSession, direction: Direction, record: TlsRecord) -> EngineEvent:
        try:
            if record.content_type == ContentType.ALERT:
                session.stats.encrypted_alerts += 1
                return EngineEvent(EventKind.SKIPPED, reason="encrypted-alert")
            if not self.config.decrypt:
                return EngineEvent(EventKind.SKIPPED, reason="parse-only")
            if not self.try_attach_keys(session, record.capture_time):
                return EngineEvent(EventKind.SKIPPED, reason="missing-key")
            try:
                self._decrypt(session, direction, record)
            except (AuthTagMismatch, MalformedRecord):
                return EngineEvent(EventKind.AUTH_FAILED, reason="finished")
            session.stats.handshake_records_decrypted += 1
            return EngineEvent(EventKind.HANDSHAKE_PROGRESS, reason="finished")
        finally:
            if session.ccs_seen[direction]:
                session.bump_seq(direction)

    def _application_data(self, session: TlsSession, direction: Direction, record: TlsRecord) -> EngineEvent:
        stats = session.stats
        supported = session.phase is Phase.ENCRYPTED
        size = len(record.payload) - AEAD_OVERHEAD if supported else len(record.payload)
        size = max(size, 0)
        stats.records_total += 1
        stats.tls_payload_bytes_total += size
        if direction is Direction.CLIENT_TO_SERVER:
            stats.bytes_client_to_server += size
        else:
            stats.bytes_server_to_client += size
        if session.first_ciphertext_time is None:
            session.first_ciphertext_time = record.capture_time
        offset = session.stream_offset[direction]
        session.stream_offset[direction] += size
        try:
            if not supported:
                reason = session.unsupported_reason or "no-handshake"
                session.stream_gap[direction] = True
                return EngineEvent(EventKind.SKIPPED, reason=reason)
            if not self.config.decrypt:
                return EngineEvent(EventKind.SKIPPED, reason="parse-only")
            if not self.try_attach_keys(session, record.capture_time):
                stats.records_missing_key += 1
                session.stream_gap[direction] = True
                log.debug("%s: no key material yet, skipping record", session.flow)
                return EngineEvent(EventKind.SKIPPED, reason="missing-key")
            try:
                plaintext = self._decrypt(session, direction, record)
            except (AuthTagMismatch, MalformedRecord) as exc:
                stats.records_auth_failed += 1
                session.stream_gap[direction] = True
                log.debug("%s: %s", session.flow, exc)
                return EngineEvent(EventKind.AUTH_FAILED, reason=str(exc))
            stats.records_decrypted += 1
            stats.tls_payload_bytes_decrypted += len(plaintext)
            sink = self.config.cleartext_sink
            if sink is not None:
                sink.handle(
                    session.flow,
                    direction,
                    offset,
                    plaintext,
                    record.capture_time,
                    gap=session.stream_gap[direction],
                    conn_id=session.conn_id,
                )
            return EngineEvent(EventKind.PLAINTEXT, data=plaintext)
        finally:
            if session.ccs_seen[direction]:
                session.bump_seq(direction)

    def finish(self) -> list[TlsSession]:
        for session in self.sessions.values():
            for parser in session._parsers.values():
                session.trailing_bytes += parser.close()
            st = session.stats
            session.stats.fully_decrypted = (
                st.records_total > 0
                and st.records_decrypted == st.records_total
                and session.keys_attached_time is not None
                and session.first_ciphertext_time is not None
                and session.keys_attached_time <= session.first_ciphertext_time
            )
        return sorted(self.sessions.values(), key=lambda s: s.conn_id)


CaptureSource = str | os.PathLike | Iterable[Frame]


def _frames(source: CaptureSource) -> Iterable[Frame]:
    if isinstance(source, (str, os.PathLike)):
        return open_capture(source)
    return source


def _store(keys: KeyStore | str | os.PathLike | None) -> KeyStore:
    if keys is None:
        return KeyStore()
    if isinstance(keys, KeyStore):
        return keys
    return KeyStore.from_file(keys)


def run_chunks(chunks: Iterable[StreamChunk], store: KeyStore, config: EngineConfig) -> list[TlsSession]:
    engine = Engine(store, config)
    for chunk in chunks:
        engine.feed_chunk(chunk)
    return engine.finish()


def run_capture(
    source: CaptureSource,
    keys: KeyStore | str | os.PathLike | None,
    config: EngineConfig | None = None,
) -> RunReport:
    """Decrypt everything in a capture and report per-session statistics."""
    config = config or EngineConfig()
    reassembler = Reassembler()
    sessions = run_chunks(reassemble(_frames(source), reassembler), _store(keys), config)
    return RunReport(sessions, reassembler.stats, config)


@dataclass(frozen=True)
class DelaySweepRow:
    delay: int  # microseconds
    conns: float | None
    tls_bytes: float | None
    bytes_total: int = 0


def sweep_delays(
    source: CaptureSource,
    keys: KeyStore | str | os.PathLike,
    delays: Sequence[int],
    seq_from_nonce: bool = True,
) -> list[DelaySweepRow]:
    """Re-run the engine once per traffic delay (microseconds)."""
    reassembler = Reassembler()
    chunks = list(reassemble(_frames(source), reassembler))
    store = _store(keys)
    rows = []
    for delay in delays:
        config = EngineConfig(traffic_delay=delay, seq_from_nonce=seq_from_nonce)
        report = RunReport(run_chunks(chunks, store, config), reassembler.stats, config)
        rows.append(DelaySweepRow(delay, report.connection_rate, report.byte_rate, report.bytes_total))
    return rows


def format_rate(rate: float | None) -> str:
    return "nan" if rate is None else f"{rate:.6f}"


def format_ms(delay_us: int) -> str:
    ms = delay_us / 1000
    return str(int(ms)) if ms == int(ms) else f"{ms:g}"


def sweep_tsv(rows: Iterable[DelaySweepRow]) -> Iterator[str]:
    yield "offset\tconns\ttls_bytes\n"
    for row in rows:
        yield f"{format_ms(row.delay)}\t{format_rate(row.conns)}\t{format_rate(row.tls_bytes)}\n"
