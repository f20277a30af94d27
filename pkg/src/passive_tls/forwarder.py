"""Endpoint daemon: tail an SSLKEYLOG file and ship new secrets to the monitor."""

from __future__ import annotations

import collections
import configparser
import enum
import fnmatch
import logging
import os
import queue
import select
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .keystore import KeyLogEntry, Skip, now_micros, parse_keylog_line
from .transport import client_context, parse_address
from .wire import KeyMessage

log = logging.getLogger(__name__)

POLL_INTERVAL = 0.05
BUFFER_CAP = 10_000
DEFAULT_BACKOFF = (0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0)


class FilterMode(enum.Enum):
    FORWARD_ALL = "forward-all"
    ALLOWLIST = "allowlist"
    BLOCKLIST = "blocklist"


class Decision(enum.Enum):
    FORWARD = "forward"
    WITHHOLD = "withhold"


class ForwarderAuthError(RuntimeError):
    pass


@dataclass
class ForwarderConfig:
    keylog_path: Path
    collector_address: tuple[str, int] = ("127.0.0.1", 4433)
    mode: FilterMode = FilterMode.FORWARD_ALL
    domain_rules: list[str] = field(default_factory=list)
    reconnect_backoff: tuple[float, ...] = DEFAULT_BACKOFF
    unknown_domain_action: Decision | None = None
    buffer_cap: int = BUFFER_CAP
    cert: Path | None = None
    key: Path | None = None
    ca: Path | None = None
    server_hostname: str | None = None
    plaintext: bool = False

    def __post_init__(self) -> None:
        self.keylog_path = Path(self.keylog_path)
        if self.mode is not FilterMode.FORWARD_ALL and not self.domain_rules:
            raise ValueError(f"{self.mode.value} mode needs at least one domain rule")
        if not self.reconnect_backoff:
            raise ValueError("reconnect_backoff must not be empty")

    @property
    def unknown_action(self) -> Decision:
        if self.unknown_domain_action is not None:
            return self.unknown_domain_action
        return Decision.FORWARD if self.mode is FilterMode.FORWARD_ALL else Decision.WITHHOLD

    def ssl_context(self) -> ssl.SSLContext | None:
        if self.plaintext:
            return None
        if not (self.cert and self.key and self.ca):
            raise ValueError("the key channel needs cert, key and ca (or plaintext for local testing)")
        return client_context(self.cert, self.key, self.ca, check_hostname=self.server_hostname is not None)


_CONFIG_KEYS = {
    "keylog_path",
    "collector",
    "mode",
    "domain_rules",
    "reconnect_backoff",
    "unknown_domain_action",
    "buffer_cap",
    "cert",
    "key",
    "ca",
    "server_hostname",
    "plaintext",
}


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Read the ``[forwarder]`` section of an INI-style config file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if not parser.has_section("forwarder"):
        raise ValueError(f"{path}: missing [forwarder] section")
    values = dict(parser.items("forwarder"))
    unknown = set(values) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    return values


def build_config(values: dict[str, object]) -> ForwarderConfig:
    """Build a config from string-ish values (config file merged with CLI flags)."""
    if not values.get("keylog_path"):
        raise ValueError("keylog_path is required")

    def path(name: str) -> Path | None:
        v = values.get(name)
        return Path(str(v)) if v else None

    rules = values.get("domain_rules") or []
    if isinstance(rules, str):
        rules = [r.strip() for r in rules.replace("\n", ",").split(",") if r.strip()]
    backoff = values.get("reconnect_backoff") or DEFAULT_BACKOFF
    if isinstance(backoff, str):
        backoff = tuple(float(x) for x in backoff.split(",") if x.strip())
    unknown = values.get("unknown_domain_action")
    plaintext = values.get("plaintext", False)
    if isinstance(plaintext, str):
        plaintext = plaintext.strip().lower() in ("1", "true", "yes", "on")
    return ForwarderConfig(
        keylog_path=Path(str(values["keylog_path"])),
        collector_address=parse_address(str(values.get("collector") or "127.0.0.1:4433")),
        mode=FilterMode(str(values.get("mode") or FilterMode.FORWARD_ALL.value)),
        domain_rules=list(rules),  # type: ignore[arg-type]
        reconnect_backoff=tuple(backoff),  # type: ignore[arg-type]
        unknown_domain_action=Decision(str(unknown)) if unknown else None,
        buffer_cap=int(values.get("buffer_cap") or BUFFER_CAP),  # type: ignore[arg-type]
        cert=path("cert"),
        key=path("key"),
        ca=path("ca"),
        server_hostname=str(values["server_hostname"]) if values.get("server_hostname") else None,
        plaintext=bool(plaintext),
    )


def _matches(domain: str, rules: Iterable[str]) -> bool:
    domain = domain.lower().rstrip(".")
    return any(fnmatch.fnmatchcase(domain, rule.lower().rstrip(".")) for rule in rules)


def filter_entry(entry: KeyLogEntry, connection_domain: str | None, config: ForwarderConfig) -> Decision:
    if config.mode is FilterMode.FORWARD_ALL:
        return Decision.FORWARD
    if connection_domain is None:
        return config.unknown_action
    hit = _matches(connection_domain, config.domain_rules)
    if config.mode is FilterMode.ALLOWLIST:
        return Decision.FORWARD if hit else Decision.WITHHOLD
    return Decision.WITHHOLD if hit else Decision.FORWARD


class KeylogWatcher:
    """Tails a keylog file, yielding each complete new line once.

    Truncation (size shrinks) and rotation (inode changes) restart reading
    at offset 0. ``poll`` is safe to call at any time; :meth:`run` drives it
    from inotify events via watchdog, or from a 50 ms timer if that fails.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        if not self.path.parent.is_dir():
            raise FileNotFoundError(f"keylog directory does not exist: {self.path.parent}")
        self._offset = 0
        self._inode: int | None = None
        self._partial = b""
        self.malformed = 0
        self.skipped = 0

    def poll(self) -> list[KeyLogEntry]:
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            return []
        if self._inode is not None and st.st_ino != self._inode:
            log.info("%s was replaced; reading from the start", self.path)
            self._offset, self._partial = 0, b""
        elif st.st_size < self._offset:
            log.info("%s was truncated; reading from the start", self.path)
            self._offset, self._partial = 0, b""
        self._inode = st.st_ino
        if st.st_size == self._offset:
            return []
        with open(self.path, "rb") as fh:
            fh.seek(self._offset)
            data = fh.read()
        self._offset += len(data)
        data = self._partial + data
        *lines, self._partial = data.split(b"\n")
        stamp = now_micros()
        out = []
        for raw in lines:
            result = parse_keylog_line(raw.decode("ascii", "replace"), stamp)
            if result is Skip.MALFORMED:
                self.malformed += 1
            elif isinstance(result, Skip):
                self.skipped += 1
            else:
                out.append(result)
        return out

    def run(self, emit: Callable[[KeyLogEntry], None], stop: threading.Event) -> None:
        wake = threading.Event()
        observer = _start_observer(self.path, wake)
        timeout = 0.5 if observer is not None else POLL_INTERVAL
        try:
            while not stop.is_set():
                for entry in self.poll():
                    emit(entry)
                wake.wait(timeout)
                wake.clear()
        finally:
            if observer is not None:
                observer.stop()
                observer.join(timeout=2)

    def __iter__(self) -> Iterator[KeyLogEntry]:
        stop = threading.Event()
        q: queue.Queue[KeyLogEntry] = queue.Queue()
        t = threading.Thread(target=self.run, args=(q.put, stop), daemon=True)
        t.start()
        try:
            while True:
                yield q.get()
        finally:
            stop.set()


def _start_observer(path: Path, wake: threading.Event):
    try:
        from watchdog.events import FileSystemEventHandler
        from watchdog.observers import Observer

        class _Wake(FileSystemEventHandler):
            def on_any_event(self, event) -> None:
                wake.set()

        observer = Observer()
        observer.schedule(_Wake(), str(path.parent), recursive=False)
        observer.start()
        return observer
    except Exception as exc:
        log.warning("file notifications unavailable (%s); polling every %d ms", exc, POLL_INTERVAL * 1000)
        return None


def watch_keylog(config: ForwarderConfig) -> Iterator[KeyLogEntry]:
    return iter(KeylogWatcher(config.keylog_path))


@dataclass
class DeliveryStats:
    sent: int = 0
    withheld: int = 0
    dropped: int = 0
    reconnects: int = 0


class KeySender:
    """Delivers KeyMessages in order, buffering while the collector is down.

    Every message is written as soon as it is queued. While disconnected,
    up to ``config.buffer_cap`` messages wait in memory; beyond that the
    oldest are dropped and counted.
    """

    def __init__(self, config: ForwarderConfig) -> None:
        self.config = config
        self.stats = DeliveryStats()
        self._ctx = config.ssl_context()
        self._buffer: collections.deque[KeyLogEntry] = collections.deque()
        self._cv = threading.Condition()
        self._sock: socket.socket | None = None
        self._closed = False
        self._attempt = 0
        self.fatal: Exception | None = None
        self._thread: threading.Thread | None = None

    def submit(self, entry: KeyLogEntry) -> None:
        with self._cv:
            if len(self._buffer) >= self.config.buffer_cap:
                self._buffer.popleft()
                self.stats.dropped += 1
            self._buffer.append(entry)
            self._cv.notify()

    @property
    def backlog(self) -> int:
        with self._cv:
            return len(self._buffer)

    def _connect(self) -> socket.socket:
        raw = socket.create_connection(self.config.collector_address, timeout=5)
        raw.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if self._ctx is None:
            return raw
        try:
            sock = self._ctx.wrap_socket(raw, server_hostname=self.config.server_hostname)
            self._await_rejection(sock)
        except ssl.SSLError as exc:
            raw.close()
            raise ForwarderAuthError(f"key channel authentication failed: {exc}") from exc
        return sock

    @staticmethod
    def _await_rejection(sock: ssl.SSLSocket, window: float = 0.05) -> None:
        """With TLS 1.3 the server checks our certificate after our side of
        the handshake is done, so a rejection shows up as an alert shortly
        afterwards. The collector never sends application data, so reading
        during a short window either hits that alert, sees EOF, or finds
        only session tickets."""
        deadline = time.monotonic() + window
        sock.setblocking(False)
        try:
            while (left := deadline - time.monotonic()) > 0:
                if not select.select([sock], [], [], left)[0]:
                    break
                try:
                    if not sock.recv(1):
                        raise ssl.SSLError("collector closed the channel during authentication")
                except ssl.SSLWantReadError:
                    continue
                except ConnectionResetError as exc:
                    raise ssl.SSLError(f"collector reset the channel during authentication: {exc}") from exc
        finally:
            sock.settimeout(5)

    def _send_one(self) -> bool:
        """Try to send the oldest buffered entry; False if the link is down."""
        with self._cv:
            if not self._buffer:
                return True
            entry = self._buffer[0]
        if self._sock is None:
            try:
                self._sock = self._connect()
                if self._attempt:
                    self.stats.reconnects += 1
                self._attempt = 0
            except ForwarderAuthError:
                raise
            except OSError as exc:
                delay = self.config.reconnect_backoff[min(self._attempt, len(self.config.reconnect_backoff) - 1)]
                self._attempt += 1
                log.debug("collector unreachable (%s); retrying in %.2fs", exc, delay)
                with self._cv:
                    self._cv.wait_for(lambda: self._closed, timeout=delay)
                return False
        frame = KeyMessage.from_entry(entry, now_micros()).encode()
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            log.info("key channel lost: %s", exc)
            self._sock.close()
            self._sock = None
            self._attempt = max(self._attempt, 1)
            return False
        with self._cv:
            if self._buffer and self._buffer[0] is entry:
                self._buffer.popleft()
            self.stats.sent += 1
            self._cv.notify_all()
        return True

    def run(self) -> None:
        try:
            while True:
                with self._cv:
                    self._cv.wait_for(lambda: self._buffer or self._closed)
                    if self._closed and not self._buffer:
                        return
                    if self._closed and self._sock is None and self._attempt:
                        return
                self._send_one()
        except ForwarderAuthError as exc:
            with self._cv:
                self.fatal = exc
                self._cv.notify_all()
            log.error("%s", exc)
        finally:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    def start(self) -> "KeySender":
        self._thread = threading.Thread(target=self.run, name="key-sender", daemon=True)
        self._thread.start()
        return self

    def flush(self, timeout: float | None = None) -> bool:
        with self._cv:
            return self._cv.wait_for(lambda: not self._buffer or self.fatal is not None, timeout=timeout)

    def close(self, timeout: float = 5.0) -> None:
        self.flush(timeout)
        with self._cv:
            self._closed = True
            self._cv.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)


def send_keys(
    entries: Iterable[KeyLogEntry],
    config: ForwarderConfig,
    domain_for: Callable[[KeyLogEntry], str | None] | None = None,
    timeout: float = 30.0,
) -> DeliveryStats:
    """Filter and deliver a finite stream of entries, then wait for the backlog."""
    sender = KeySender(config).start()
    for entry in entries:
        domain = domain_for(entry) if domain_for else None
        if filter_entry(entry, domain, config) is Decision.FORWARD:
            sender.submit(entry)
        else:
            sender.stats.withheld += 1
    sender.close(timeout)
    if sender.fatal is not None:
        raise sender.fatal
    return sender.stats


class Forwarder:
    """Watcher and sender joined by the sender's ordered queue."""

    def __init__(self, config: ForwarderConfig, domain_for: Callable[[KeyLogEntry], str | None] | None = None):
        self.config = config
        self.domain_for = domain_for
        self.watcher = KeylogWatcher(config.keylog_path)
        self.sender = KeySender(config)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def stats(self) -> DeliveryStats:
        return self.sender.stats

    def _emit(self, entry: KeyLogEntry) -> None:
        domain = self.domain_for(entry) if self.domain_for else None
        if filter_entry(entry, domain, self.config) is Decision.FORWARD:
            self.sender.submit(entry)
        else:
            self.sender.stats.withheld += 1

    def start(self) -> "Forwarder":
        self.sender.start()
        self._thread = threading.Thread(target=self.watcher.run, args=(self._emit, self._stop), daemon=True)
        self._thread.start()
        return self

    def run_forever(self) -> None:
        self.start()
        try:
            while self.sender.fatal is None:
                time.sleep(0.2)
        finally:
            self.stop()
        raise self.sender.fatal

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
        self.sender.close(timeout)
