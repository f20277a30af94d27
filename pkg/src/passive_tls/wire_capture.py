"""Packet capture input and per-direction TCP stream reassembly."""

from __future__ import annotations

import ipaddress
import logging
import os
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import dpkt

from .flows import Direction, FlowKey

log = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1
# DLT_RAW has several numeric aliases across platforms
RAW_IP_LINKTYPES = frozenset({12, 14, 101, 228, 229})
SUPPORTED_LINKTYPES = frozenset({LINKTYPE_ETHERNET}) | RAW_IP_LINKTYPES

DEFAULT_BUFFER_CAP = 1 << 20
RETAIN_WINDOW = 1 << 16

_PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"


class CaptureError(Exception):
    pass


@dataclass(frozen=True)
class Frame:
    timestamp: int  # microseconds since the Unix epoch
    linktype: int
    data: bytes


@dataclass(frozen=True)
class StreamChunk:
    """Contiguous, newly delivered bytes of one connection direction.

    ``conn_id`` tells apart successive connections that reuse a 4-tuple.
    """

    flow: FlowKey
    direction: Direction
    data: bytes
    capture_time: int
    conn_id: int = 0


def _to_micros(ts) -> int:
    return int(round(float(ts) * 1_000_000))


def open_capture(source: str | os.PathLike, filter: str | None = None) -> Iterator[Frame]:
    """Open a pcap/pcapng file or a live interface and iterate its frames.

    Errors for missing files and unsupported link types are raised here,
    before the first frame is requested.
    """
    path = Path(source)
    if path.exists():
        if filter:
            return _scapy_frames(offline=str(path), filter=filter)
        return _file_frames(path)
    if _is_interface(str(source)):
        return _scapy_frames(iface=str(source), filter=filter)
    raise FileNotFoundError(f"capture source not found: {source}")


def _is_interface(name: str) -> bool:
    try:
        return name in {n for _, n in socket.if_nameindex()}
    except OSError:
        return False


def _file_frames(path: Path) -> Iterator[Frame]:
    fh = open(path, "rb")
    try:
        magic = fh.read(4)
        fh.seek(0)
        if not magic:
            fh.close()
            return iter(())
        reader = dpkt.pcapng.Reader(fh) if magic == _PCAPNG_MAGIC else dpkt.pcap.Reader(fh)
    except (ValueError, dpkt.dpkt.Error) as exc:
        fh.close()
        raise CaptureError(f"{path}: not a readable pcap/pcapng file ({exc})") from exc
    linktype = reader.datalink()
    if linktype not in SUPPORTED_LINKTYPES:
        fh.close()
        raise CaptureError(f"{path}: unsupported link type {linktype} (only Ethernet and raw IP are handled)")

    def frames() -> Iterator[Frame]:
        with fh:
            for ts, buf in reader:
                yield Frame(_to_micros(ts), linktype, bytes(buf))

    return frames()


def _scapy_frames(*, offline: str | None = None, iface: str | None = None, filter: str | None = None) -> Iterator[Frame]:
    try:
        from scapy.all import conf, sniff
    except ImportError as exc:  # pragma: no cover - optional extra
        raise CaptureError("live capture and capture filters need scapy (pip install 'artifact[live]')") from exc

    if offline is not None:
        try:
            packets = sniff(offline=offline, filter=filter, store=True)
        except Exception as exc:
            raise CaptureError(f"cannot apply filter {filter!r} to {offline}: {exc}") from exc
        frames = [Frame(_to_micros(p.time), LINKTYPE_ETHERNET, bytes(p)) for p in packets]
        return iter(frames)

    try:
        sock = conf.L2listen(iface=iface, filter=filter)
    except Exception as exc:
        raise CaptureError(f"cannot capture on {iface}: {exc}") from exc

    def live() -> Iterator[Frame]:
        try:
            while True:
                pkt = sock.recv()
                if pkt is not None:
                    yield Frame(_to_micros(pkt.time), LINKTYPE_ETHERNET, bytes(pkt))
        finally:
            sock.close()

    return live()


@dataclass
class CaptureStats:
    frames: int = 0
    tcp_segments: int = 0
    non_tcp: int = 0
    fragments: int = 0
    unparseable: int = 0
    duplicates: int = 0
    conflicts: int = 0
    dropped_flows: int = 0
    gap_bytes: int = 0
    flows: int = 0


@dataclass
class _Half:
    isn: int | None = None
    next_pos: int | None = None
    pending: dict[int, bytes] = field(default_factory=dict)
    pending_bytes: int = 0
    retained: bytearray = field(default_factory=bytearray)
    fin_pos: int | None = None

    def unwrap(self, seq: int) -> int:
        if self.next_pos is None:
            return seq
        diff = (seq - self.next_pos) & 0xFFFFFFFF
        if diff >= 1 << 31:
            diff -= 1 << 32
        return self.next_pos + diff

    def retained_slice(self, start: int, end: int) -> bytes | None:
        """Return already delivered bytes [start, end) if still retained."""
        assert self.next_pos is not None
        first = self.next_pos - len(self.retained)
        if start < first:
            return None
        return bytes(self.retained[start - first : end - first])

    def retain(self, data: bytes) -> None:
        self.retained += data
        if len(self.retained) > RETAIN_WINDOW:
            del self.retained[: len(self.retained) - RETAIN_WINDOW]


@dataclass
class _Flow:
    key: FlowKey
    conn_id: int
    halves: dict[Direction, _Half] = field(default_factory=lambda: {d: _Half() for d in Direction})
    dropped: bool = False


def _decode(frame: Frame, stats: CaptureStats):
    try:
        if frame.linktype == LINKTYPE_ETHERNET:
            ip = dpkt.ethernet.Ethernet(frame.data).data
        else:
            version = frame.data[0] >> 4 if frame.data else 0
            if version == 4:
                ip = dpkt.ip.IP(frame.data)
            elif version == 6:
                ip = dpkt.ip6.IP6(frame.data)
            else:
                stats.unparseable += 1
                return None
    except (dpkt.dpkt.Error, IndexError, ValueError):
        stats.unparseable += 1
        return None
    if isinstance(ip, dpkt.ip.IP):
        if ip.mf or ip.offset:
            stats.fragments += 1
            return None
        src, dst = ipaddress.IPv4Address(ip.src), ipaddress.IPv4Address(ip.dst)
    elif isinstance(ip, dpkt.ip6.IP6):
        if 44 in getattr(ip, "extension_hdrs", {}) and ip.extension_hdrs.get(44) is not None:
            stats.fragments += 1
            return None
        src, dst = ipaddress.IPv6Address(ip.src), ipaddress.IPv6Address(ip.dst)
    else:
        stats.non_tcp += 1
        return None
    tcp = ip.data
    if not isinstance(tcp, dpkt.tcp.TCP):
        if isinstance(tcp, bytes) and ip.p == dpkt.ip.IP_PROTO_TCP:
            stats.unparseable += 1
        else:
            stats.non_tcp += 1
        return None
    return src, dst, tcp


def _looks_like_hello(payload: bytes, hs_type: int) -> bool:
    return len(payload) > 5 and payload[0] == 22 and payload[1] == 3 and payload[5] == hs_type


class Reassembler:
    """Turns frames into ordered, deduplicated per-direction byte chunks.

    Segments that arrive ahead of a gap wait in a buffer capped at
    ``buffer_cap`` bytes per direction; a flow that exceeds it is dropped.
    """

    def __init__(self, buffer_cap: int = DEFAULT_BUFFER_CAP) -> None:
        self.buffer_cap = buffer_cap
        self.stats = CaptureStats()
        self._flows: dict[FlowKey, _Flow] = {}
        self._closed: set[FlowKey] = set()
        self._next_conn_id = 0

    def feed(self, frame: Frame) -> list[StreamChunk]:
        self.stats.frames += 1
        decoded = _decode(frame, self.stats)
        if decoded is None:
            return []
        src, dst, tcp = decoded
        self.stats.tcp_segments += 1
        raw = FlowKey(src, tcp.sport, dst, tcp.dport)
        canon, _ = raw.canonical()
        syn = bool(tcp.flags & dpkt.tcp.TH_SYN)
        ack = bool(tcp.flags & dpkt.tcp.TH_ACK)
        payload = bytes(tcp.data)

        flow = self._flows.get(canon)
        if flow is None:
            if canon in self._closed and not (syn and not ack):
                return []
            if not (syn or payload):
                return []
            flow = self._open(raw, canon, syn, ack, payload)

        if flow.dropped:
            return []
        direction = Direction.CLIENT_TO_SERVER if raw == flow.key else Direction.SERVER_TO_CLIENT
        isn = flow.halves[direction].isn
        if syn and not ack and direction is Direction.CLIENT_TO_SERVER and isn is not None and isn != tcp.seq:
            # new connection on a reused 4-tuple
            self._close(canon)
            flow = self._open(raw, canon, syn, ack, payload)
        half = flow.halves[direction]

        seq = tcp.seq
        if syn:
            if half.isn is None:
                half.isn = seq
            if half.next_pos is None:
                half.next_pos = seq + 1
            seq = (seq + 1) & 0xFFFFFFFF
        if half.next_pos is None:
            half.next_pos = seq
        pos = half.unwrap(seq)

        out: list[StreamChunk] = []
        if payload:
            delivered = self._accept(flow, half, pos, payload)
            if delivered:
                out.append(StreamChunk(flow.key, direction, delivered, frame.timestamp, flow.conn_id))
        if tcp.flags & dpkt.tcp.TH_FIN:
            half.fin_pos = pos + len(payload)
        if tcp.flags & dpkt.tcp.TH_RST:
            self._close(canon)
        elif all(h.fin_pos is not None and h.next_pos == h.fin_pos for h in flow.halves.values()):
            self._close(canon)
        return out

    def _open(self, raw: FlowKey, canon: FlowKey, syn: bool, ack: bool, payload: bytes) -> _Flow:
        if syn and not ack:
            key = raw
        elif syn and ack:
            key = raw.reversed()
        elif _looks_like_hello(payload, 1):
            key = raw
        elif _looks_like_hello(payload, 2):
            key = raw.reversed()
        elif raw.src_port > raw.dst_port:
            key = raw
        else:
            key = raw.reversed()
        flow = _Flow(key, self._next_conn_id)
        self._next_conn_id += 1
        self._flows[canon] = flow
        self._closed.discard(canon)
        self.stats.flows += 1
        return flow

    def _close(self, canon: FlowKey) -> None:
        flow = self._flows.pop(canon, None)
        if flow is not None:
            self.stats.gap_bytes += sum(h.pending_bytes for h in flow.halves.values())
        self._closed.add(canon)

    def _check_overlap(self, half: _Half, pos: int, data: bytes) -> None:
        seen = half.retained_slice(pos, pos + len(data))
        if seen is not None and seen != data:
            self.stats.conflicts += 1

    def _accept(self, flow: _Flow, half: _Half, pos: int, data: bytes) -> bytes:
        assert half.next_pos is not None
        end = pos + len(data)
        if end <= half.next_pos:
            self.stats.duplicates += 1
            self._check_overlap(half, pos, data)
            return b""
        if pos < half.next_pos:
            cut = half.next_pos - pos
            self._check_overlap(half, pos, data[:cut])
            data, pos = data[cut:], half.next_pos
        if pos > half.next_pos:
            self._hold(flow, half, pos, data)
            return b""
        out = bytearray(data)
        half.next_pos = end
        half.retain(data)
        out += self._drain(half)
        return bytes(out)

    def _hold(self, flow: _Flow, half: _Half, pos: int, data: bytes) -> None:
        existing = half.pending.get(pos)
        if existing is not None:
            if existing == data:
                self.stats.duplicates += 1
                return
            n = min(len(existing), len(data))
            if existing[:n] != data[:n]:
                self.stats.conflicts += 1
            if len(data) <= len(existing):
                return
            data = existing + data[len(existing) :]
            half.pending_bytes -= len(existing)
        half.pending[pos] = data
        half.pending_bytes += len(data)
        if half.pending_bytes > self.buffer_cap:
            log.warning("dropping flow %s: out-of-order buffer exceeded %d bytes", flow.key, self.buffer_cap)
            self.stats.dropped_flows += 1
            flow.dropped = True
            for h in flow.halves.values():
                h.pending.clear()
                h.pending_bytes = 0

    def _drain(self, half: _Half) -> bytes:
        out = bytearray()
        while half.pending:
            pos = min(half.pending)
            if pos > half.next_pos:
                break
            data = half.pending.pop(pos)
            half.pending_bytes -= len(data)
            end = pos + len(data)
            if end <= half.next_pos:
                self.stats.duplicates += 1
                self._check_overlap(half, pos, data)
                continue
            cut = half.next_pos - pos
            if cut:
                self._check_overlap(half, pos, data[:cut])
            fresh = data[cut:]
            out += fresh
            half.next_pos = end
            half.retain(fresh)
        return bytes(out)

    def finish(self) -> None:
        """Finalize all open flows at capture end; gaps lose their tail."""
        for canon in list(self._flows):
            self._close(canon)


def reassemble(frames: Iterable[Frame], reassembler: Reassembler | None = None) -> Iterator[StreamChunk]:
    r = reassembler or Reassembler()
    for frame in frames:
        yield from r.feed(frame)
    r.finish()
