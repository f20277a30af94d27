"""Key material ingestion and lookup by client random.

Two on-disk formats are read:

* NSS/SSLKEYLOG lines: ``CLIENT_RANDOM <hex random> <hex secret>``. Also
  accepted is the Wireshark extension ``PMS_CLIENT_RANDOM`` for an explicit
  pre-master secret.
* Timestamped TSV for replaying arrival times:
  ``arrival_unix_micros<TAB>LABEL<TAB>hex_random<TAB>hex_secret`` where
  LABEL is one of the above, or ``SESSION_KEYS`` for a raw 72-byte key block.
"""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, TextIO

from .crypto import KEY_BLOCK_LEN, MASTER_SECRET_LEN, RANDOM_LEN

log = logging.getLogger(__name__)

LABEL_CLIENT_RANDOM = "CLIENT_RANDOM"
LABEL_PMS = "PMS_CLIENT_RANDOM"
LABEL_SESSION_KEYS = "SESSION_KEYS"

# TLS 1.3 and other labels an SSLKEYLOG file may contain; skipped, not malformed
KNOWN_OTHER_LABELS = frozenset(
    {
        "RSA",
        "CLIENT_EARLY_TRAFFIC_SECRET",
        "CLIENT_HANDSHAKE_TRAFFIC_SECRET",
        "SERVER_HANDSHAKE_TRAFFIC_SECRET",
        "CLIENT_TRAFFIC_SECRET_0",
        "SERVER_TRAFFIC_SECRET_0",
        "EARLY_EXPORTER_SECRET",
        "EXPORTER_SECRET",
        "RSA_SESSION_ID",
    }
)


class KeyKind(enum.IntEnum):
    PRE_MASTER = 1
    MASTER = 2
    SESSION_KEYS = 3


PRELOADED = 0


def now_micros() -> int:
    return time.time_ns() // 1000


@dataclass(frozen=True)
class KeyLogEntry:
    kind: KeyKind
    client_random: bytes
    secret: bytes
    arrival_time: int

    def __post_init__(self) -> None:
        if len(self.client_random) != RANDOM_LEN:
            raise ValueError("client random must be 32 bytes")
        if not self.secret:
            raise ValueError("secret must be non-empty")
        if self.kind is KeyKind.MASTER and len(self.secret) != MASTER_SECRET_LEN:
            raise ValueError("master secret must be 48 bytes")
        if self.kind is KeyKind.SESSION_KEYS and len(self.secret) != KEY_BLOCK_LEN:
            raise ValueError(f"session key block must be {KEY_BLOCK_LEN} bytes")


@dataclass
class KeyStoreStats:
    entries_total: int = 0
    duplicates: int = 0
    malformed_lines: int = 0
    skipped_lines: int = 0
    evictions: int = 0


class Skip(enum.Enum):
    """Why a keylog line produced no entry."""

    COMMENT = "comment"
    OTHER_LABEL = "other-label"
    MALFORMED = "malformed"


def _entry(label: str, hex_random: str, hex_secret: str, arrival_time: int) -> KeyLogEntry | Skip:
    try:
        client_random = bytes.fromhex(hex_random)
        secret = bytes.fromhex(hex_secret)
    except ValueError:
        return Skip.MALFORMED
    if len(client_random) != RANDOM_LEN or len(secret) < 2:
        return Skip.MALFORMED
    if label == LABEL_CLIENT_RANDOM:
        kind = KeyKind.MASTER if len(secret) == MASTER_SECRET_LEN else KeyKind.PRE_MASTER
    elif label == LABEL_PMS:
        kind = KeyKind.PRE_MASTER
    elif label == LABEL_SESSION_KEYS:
        if len(secret) != KEY_BLOCK_LEN:
            return Skip.MALFORMED
        kind = KeyKind.SESSION_KEYS
    else:
        return Skip.OTHER_LABEL
    return KeyLogEntry(kind, client_random, secret, arrival_time)


def parse_keylog_line(line: str, arrival_time: int | None = None) -> KeyLogEntry | Skip:
    """Parse one SSLKEYLOG line.

    The arrival time defaults to the current wall clock; the receiver of
    the material is the one that stamps it.
    """
    text = line.strip()
    if not text or text.startswith("#"):
        return Skip.COMMENT
    fields = text.split()
    label = fields[0]
    if label not in (LABEL_CLIENT_RANDOM, LABEL_PMS, LABEL_SESSION_KEYS):
        return Skip.OTHER_LABEL if label in KNOWN_OTHER_LABELS or label.isupper() else Skip.MALFORMED
    if len(fields) != 3:
        return Skip.MALFORMED
    return _entry(label, fields[1], fields[2], now_micros() if arrival_time is None else arrival_time)


def parse_timestamped_line(line: str) -> KeyLogEntry | Skip:
    text = line.rstrip("\r\n")
    if not text.strip() or text.lstrip().startswith("#"):
        return Skip.COMMENT
    fields = text.split("\t")
    if len(fields) != 4 or not fields[0].isdigit():
        return Skip.MALFORMED
    label = fields[1]
    if label not in (LABEL_CLIENT_RANDOM, LABEL_PMS, LABEL_SESSION_KEYS):
        return Skip.OTHER_LABEL
    return _entry(label, fields[2], fields[3], int(fields[0]))


def label_for(entry: KeyLogEntry) -> str:
    if entry.kind is KeyKind.SESSION_KEYS:
        return LABEL_SESSION_KEYS
    if entry.kind is KeyKind.PRE_MASTER and len(entry.secret) == MASTER_SECRET_LEN:
        return LABEL_PMS
    return LABEL_CLIENT_RANDOM


def format_keylog_line(entry: KeyLogEntry) -> str:
    return f"{label_for(entry)} {entry.client_random.hex()} {entry.secret.hex()}"


def format_timestamped_line(entry: KeyLogEntry) -> str:
    return f"{entry.arrival_time}\t{label_for(entry)}\t{entry.client_random.hex()}\t{entry.secret.hex()}"


class KeyStore:
    """Thread-safe map from client random to the first entry seen for it.

    ``max_entries`` enables LRU eviction; the library default is unbounded.
    """

    def __init__(self, max_entries: int | None = None) -> None:
        self._entries: OrderedDict[bytes, KeyLogEntry] = OrderedDict()
        self._lock = threading.Lock()
        self.max_entries = max_entries
        self.stats = KeyStoreStats()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __iter__(self) -> Iterator[KeyLogEntry]:
        with self._lock:
            return iter(list(self._entries.values()))

    def ingest(self, entry: KeyLogEntry) -> bool:
        """Store ``entry``; returns False if its client random was already known."""
        with self._lock:
            if entry.client_random in self._entries:
                self.stats.duplicates += 1
                return False
            self._entries[entry.client_random] = entry
            self.stats.entries_total += 1
            if self.max_entries is not None and len(self._entries) > self.max_entries:
                self._entries.popitem(last=False)
                self.stats.evictions += 1
            return True

    def lookup(self, client_random: bytes, as_of: int | None = None) -> KeyLogEntry | None:
        """Find the entry for ``client_random``.

        With ``as_of`` set, only an entry that arrived at or before that
        time counts; ``None`` ignores arrival times altogether.
        """
        with self._lock:
            entry = self._entries.get(client_random)
            if entry is None:
                return None
            if self.max_entries is not None:
                self._entries.move_to_end(client_random)
        if as_of is not None and entry.arrival_time > as_of:
            return None
        return entry

    def record_skip(self, skip: Skip) -> None:
        with self._lock:
            if skip is Skip.MALFORMED:
                self.stats.malformed_lines += 1
            else:
                self.stats.skipped_lines += 1

    def load_lines(self, lines: Iterable[str], arrival_time: int | None = None) -> None:
        """Ingest SSLKEYLOG or timestamped-TSV lines, detected per line."""
        for line in lines:
            if "\t" in line and line.split("\t", 1)[0].strip().isdigit():
                result = parse_timestamped_line(line)
            else:
                result = parse_keylog_line(line, arrival_time)
            if isinstance(result, Skip):
                self.record_skip(result)
            else:
                self.ingest(result)

    @classmethod
    def from_file(cls, path: str | os.PathLike, arrival_time: int | None = PRELOADED) -> "KeyStore":
        """Load a key file. Plain SSLKEYLOG lines carry no time, so by default
        they count as known before any packet (``PRELOADED``); TSV lines keep
        their own timestamps."""
        store = cls()
        with open(path, encoding="ascii", errors="replace") as fh:
            store.load_lines(fh, arrival_time)
        log.info("loaded %d key entries from %s (%d malformed)", len(store), path, store.stats.malformed_lines)
        return store


def read_timestamped(path: str | os.PathLike) -> list[KeyLogEntry]:
    entries = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            result = parse_timestamped_line(line)
            if isinstance(result, KeyLogEntry):
                entries.append(result)
    return entries


def write_timestamped(entries: Iterable[KeyLogEntry], out: TextIO | str | os.PathLike) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(Path(out), "w", encoding="ascii") as fh:
            write_timestamped(entries, fh)
        return
    for entry in entries:
        out.write(format_timestamped_line(entry) + "\n")
