"""Monitor-side listener that ingests key material sent by forwarders."""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import ssl
import threading
from typing import Callable, TextIO

from .keystore import KeyLogEntry, KeyStore, format_timestamped_line, now_micros
from .wire import FrameDecoder, FrameError

log = logging.getLogger(__name__)


class _Handler(socketserver.BaseRequestHandler):
    server: "_Server"

    def handle(self) -> None:
        sock = self.request
        peer = self.client_address
        if isinstance(sock, ssl.SSLSocket):
            try:
                sock.do_handshake()
            except (ssl.SSLError, OSError) as exc:
                log.warning("rejected key channel from %s: %s", peer, exc)
                return
        decoder = FrameDecoder()
        receiver = self.server.receiver
        receiver._track(sock, add=True)
        try:
            while True:
                try:
                    data = sock.recv(65536)
                except (ssl.SSLError, OSError) as exc:
                    log.info("key channel from %s closed: %s", peer, exc)
                    return
                if not data:
                    if decoder.pending:
                        log.warning("key channel from %s ended inside a frame", peer)
                    return
                try:
                    messages = decoder.feed(data)
                except FrameError as exc:
                    receiver.decode_errors += 1
                    log.warning("dropping key channel from %s: %s", peer, exc)
                    return
                for msg in messages:
                    receiver.accept(msg.to_entry(now_micros()))
        finally:
            receiver._track(sock, add=False)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, receiver: "KeyReceiver") -> None:
        self.receiver = receiver
        super().__init__(address, _Handler)

    def get_request(self):
        sock, addr = super().get_request()
        ctx = self.receiver.ssl_context
        if ctx is not None:
            sock = ctx.wrap_socket(sock, server_side=True, do_handshake_on_connect=False)
        return sock, addr


class KeyReceiver:
    """Accepts forwarder connections and ingests their KeyMessages.

    Each entry is stamped with the local arrival time. With ``tee`` set,
    entries are also appended to a timestamped-keylog TSV so that a live
    session can be replayed later by the delay simulation.
    """

    def __init__(
        self,
        store: KeyStore,
        address: tuple[str, int] = ("127.0.0.1", 0),
        ssl_context: ssl.SSLContext | None = None,
        tee: str | os.PathLike | TextIO | None = None,
        on_entry: Callable[[KeyLogEntry], None] | None = None,
    ) -> None:
        self.store = store
        self.ssl_context = ssl_context
        self.on_entry = on_entry
        self.decode_errors = 0
        self.received = 0
        self._lock = threading.Lock()
        self._own_tee = isinstance(tee, (str, os.PathLike))
        self._tee: TextIO | None = open(tee, "a", encoding="ascii") if self._own_tee else tee  # type: ignore[arg-type]
        self._server = _Server(address, self)
        self._thread: threading.Thread | None = None
        self._conns: set[socket.socket] = set()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def accept(self, entry: KeyLogEntry) -> None:
        self.store.ingest(entry)
        with self._lock:
            self.received += 1
            if self._tee is not None:
                self._tee.write(format_timestamped_line(entry) + "\n")
                self._tee.flush()
        if self.on_entry is not None:
            self.on_entry(entry)

    def _track(self, sock: socket.socket, add: bool) -> None:
        with self._lock:
            (self._conns.add if add else self._conns.discard)(sock)

    def serve_forever(self) -> None:
        log.info("receiving keys on %s:%d", *self.address)
        self._server.serve_forever(poll_interval=0.1)

    def start(self) -> "KeyReceiver":
        self._thread = threading.Thread(target=self.serve_forever, name="key-receiver", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            for sock in list(self._conns):
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._tee is not None and self._own_tee:
            self._tee.close()

    def __enter__(self) -> "KeyReceiver":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
