"""Ground-truth capture generation for tests.

TLS sessions come from OpenSSL (via the stdlib ``ssl`` module over memory
BIOs), which writes its own SSLKEYLOG. Packets are written with scapy. Our
package is not used anywhere in here, so fixtures stay independent of the
code under test.
"""

from __future__ import annotations

import datetime
import functools
import random
import ssl
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.x509.oid import NameOID

SUITE = "ECDHE-RSA-AES256-GCM-SHA384"
BASE_TIME_US = 1_700_000_000_000_000
MSS = 1400


@dataclass
class CertBundle:
    ca: Path
    cert: Path
    key: Path


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def make_pki(directory: Path, names: tuple[str, ...] = ("server", "client")) -> dict[str, CertBundle]:
    """A throwaway CA plus one leaf certificate per name (CN = name, SAN localhost)."""
    directory.mkdir(parents=True, exist_ok=True)
    now = datetime.datetime.now(datetime.timezone.utc)
    ca_key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    ca_cert = (
        x509.CertificateBuilder()
        .subject_name(_name("test-ca"))
        .issuer_name(_name("test-ca"))
        .public_key(ca_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(days=1))
        .not_valid_after(now + datetime.timedelta(days=7))
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(ca_key, hashes.SHA256())
    )
    ca_path = directory / "ca.pem"
    ca_path.write_bytes(ca_cert.public_bytes(serialization.Encoding.PEM))
    out = {}
    for name in names:
        key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        cert = (
            x509.CertificateBuilder()
            .subject_name(_name(name))
            .issuer_name(ca_cert.subject)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(days=1))
            .not_valid_after(now + datetime.timedelta(days=7))
            .add_extension(x509.SubjectAlternativeName([x509.DNSName("localhost"), x509.DNSName(name)]), critical=False)
            .sign(ca_key, hashes.SHA256())
        )
        cert_path = directory / f"{name}.pem"
        key_path = directory / f"{name}.key"
        cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        key_path.write_bytes(
            key.private_bytes(
                serialization.Encoding.PEM, serialization.PrivateFormat.TraditionalOpenSSL, serialization.NoEncryption()
            )
        )
        out[name] = CertBundle(ca_path, cert_path, key_path)
    return out


@functools.lru_cache(maxsize=1)
def _server_pki() -> CertBundle:
    d = Path(tempfile.mkdtemp(prefix="tlsfix-pki-"))
    return make_pki(d, ("server",))["server"]


@dataclass
class Flight:
    """Bytes one side put on the wire at one moment."""

    c2s: bool
    data: bytes
    time_us: int
    app_data: bool = False


@dataclass
class SessionFixture:
    client_ip: str
    server_ip: str
    client_port: int
    server_port: int
    flights: list[Flight]
    keylog_line: str
    c2s_plain: bytes = b""
    s2c_plain: bytes = b""
    first_app_time_us: int | None = None
    last_time_us: int = 0

    @property
    def client_random_hex(self) -> str:
        return self.keylog_line.split()[1]

    @property
    def master_hex(self) -> str:
        return self.keylog_line.split()[2]


class OpenSSLPair:
    """A TLS 1.2 client/server pair talking over memory BIOs."""

    def __init__(self, keylog: Path, cipher: str = SUITE, max_version=ssl.TLSVersion.TLSv1_2) -> None:
        pki = _server_pki()
        sctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        sctx.load_cert_chain(pki.cert, pki.key)
        sctx.maximum_version = max_version
        cctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        cctx.check_hostname = False
        cctx.verify_mode = ssl.CERT_NONE
        cctx.maximum_version = max_version
        if max_version <= ssl.TLSVersion.TLSv1_2:
            sctx.set_ciphers(cipher)
            cctx.set_ciphers(cipher)
        cctx.keylog_filename = str(keylog)
        self._keylog = keylog
        self._cin, self._cout, self._sin, self._sout = (ssl.MemoryBIO() for _ in range(4))
        self.client = cctx.wrap_bio(self._cin, self._cout, server_side=False)
        self.server = sctx.wrap_bio(self._sin, self._sout, server_side=True)

    def _pump(self) -> list[tuple[bool, bytes]]:
        out = []
        d = self._cout.read()
        if d:
            out.append((True, d))
            self._sin.write(d)
        d = self._sout.read()
        if d:
            out.append((False, d))
            self._cin.write(d)
        return out

    def handshake(self) -> list[tuple[bool, bytes]]:
        flights: list[tuple[bool, bytes]] = []
        done = {"c": False, "s": False}
        for _ in range(20):
            for tag, obj in (("c", self.client), ("s", self.server)):
                if done[tag]:
                    continue
                try:
                    obj.do_handshake()
                    done[tag] = True
                except ssl.SSLWantReadError:
                    pass
                flights.extend(self._pump())
            if all(done.values()):
                flights.extend(self._pump())
                return flights
        raise RuntimeError("handshake did not complete")

    def send(self, from_client: bool, data: bytes) -> bytes:
        (self.client if from_client else self.server).write(data)
        wire = self._cout.read() if from_client else self._sout.read()
        (self._sin if from_client else self._cin).write(wire)
        # drain the receiving side so its buffers stay small
        other = self.server if from_client else self.client
        got = b""
        while len(got) < len(data):
            got += other.read(len(data) - len(got))
        assert got == data
        return wire

    def close_notify(self) -> bytes:
        try:
            self.client.unwrap()
        except ssl.SSLWantReadError:
            pass
        return self._cout.read()

    def keylog_line(self) -> str:
        lines = [l for l in self._keylog.read_text().splitlines() if l.startswith("CLIENT_RANDOM")]
        return lines[-1]


def http1_exchange(rng: random.Random, index: int, response_records: int, record_size: int) -> tuple[bytes, list[bytes]]:
    request = f"GET /object/{index} HTTP/1.1\r\nHost: site{index}.example\r\nAccept: */*\r\n\r\n".encode()
    body_parts = [rng.randbytes(record_size) for _ in range(response_records)]
    header = f"HTTP/1.1 200 OK\r\nContent-Length: {sum(map(len, body_parts))}\r\n\r\n".encode()
    body_parts[0] = header + body_parts[0]
    return request, body_parts


def http2_exchange(rng: random.Random, response_records: int, record_size: int) -> tuple[bytes, list[bytes]]:
    preface = b"PRI * HTTP/2.0\r\n\r\nSM\r\n\r\n"
    settings = b"\x00\x00\x00\x04\x00\x00\x00\x00\x00"
    parts = [rng.randbytes(record_size) for _ in range(response_records)]
    return preface + settings, parts


def generate_session(
    keylog: Path,
    index: int,
    start_us: int,
    rng: random.Random,
    response_records: int = 3,
    record_size: int = 2000,
    record_gap_us: int = 2000,
    http2: bool = False,
    cipher: str = SUITE,
    extra_request: bytes | None = None,
) -> SessionFixture:
    """One connection: handshake, a request, a spaced-out response, close_notify."""
    pair = OpenSSLPair(keylog, cipher=cipher)
    flights: list[Flight] = []
    t = start_us + 1000  # after the TCP handshake
    for c2s, data in pair.handshake():
        flights.append(Flight(c2s, data, t))
        t += 300
    if http2:
        request, responses = http2_exchange(rng, response_records, record_size)
    else:
        request, responses = http1_exchange(rng, index, response_records, record_size)
    t += 500
    fx = SessionFixture(
        client_ip=f"10.0.{index // 250}.{index % 250 + 2}",
        server_ip="192.0.2.10",
        client_port=40000 + index,
        server_port=443,
        flights=flights,
        keylog_line=pair.keylog_line(),
    )
    fx.first_app_time_us = t
    flights.append(Flight(True, pair.send(True, request), t, app_data=True))
    fx.c2s_plain += request
    for part in responses:
        t += record_gap_us
        flights.append(Flight(False, pair.send(False, part), t, app_data=True))
        fx.s2c_plain += part
    if extra_request:
        t += record_gap_us
        flights.append(Flight(True, pair.send(True, extra_request), t, app_data=True))
        fx.c2s_plain += extra_request
    t += 500
    flights.append(Flight(True, pair.close_notify(), t))
    fx.last_time_us = t
    return fx


@dataclass
class WireOptions:
    mss: int = MSS
    reorder: bool = False
    duplicate: bool = False
    seed: int = 0


def session_packets(fx: SessionFixture, opts: WireOptions | None = None) -> list:
    """Scapy packets (with ``.time`` set) carrying one fixture session over TCP."""
    from scapy.layers.inet import IP, TCP
    from scapy.layers.l2 import Ether
    from scapy.packet import Raw

    opts = opts or WireOptions()
    rng = random.Random(opts.seed)
    cseq, sseq = 1000 + fx.client_port, 5000 + fx.client_port
    start = fx.flights[0].time_us - 1000

    def pkt(c2s: bool, flags: str, seq: int, ack: int, payload: bytes, t_us: int):
        src, dst = (fx.client_ip, fx.server_ip) if c2s else (fx.server_ip, fx.client_ip)
        sport, dport = (fx.client_port, fx.server_port) if c2s else (fx.server_port, fx.client_port)
        p = Ether(src="02:00:00:00:00:01", dst="02:00:00:00:00:02") / IP(src=src, dst=dst) / TCP(sport=sport, dport=dport, flags=flags, seq=seq, ack=ack)
        if payload:
            p = p / Raw(payload)
        p.time = t_us / 1_000_000
        return p

    pkts = [
        pkt(True, "S", cseq, 0, b"", start),
        pkt(False, "SA", sseq, cseq + 1, b"", start + 100),
        pkt(True, "A", cseq + 1, sseq + 1, b"", start + 200),
    ]
    cnext, snext = cseq + 1, sseq + 1
    for flight in fx.flights:
        segs = [flight.data[i : i + opts.mss] for i in range(0, len(flight.data), opts.mss)]
        group = []
        for k, seg in enumerate(segs):
            if flight.c2s:
                group.append(pkt(True, "PA", cnext, snext, seg, flight.time_us + k))
                cnext += len(seg)
            else:
                group.append(pkt(False, "PA", snext, cnext, seg, flight.time_us + k))
                snext += len(seg)
        if opts.reorder and len(group) >= 2:
            i = rng.randrange(len(group) - 1)
            group[i], group[i + 1] = group[i + 1], group[i]
            group[i].time, group[i + 1].time = group[i + 1].time, group[i].time
        if opts.duplicate and group:
            dup = group[rng.randrange(len(group))].copy()
            dup.time = group[-1].time + 0.000001
            group.append(dup)
        pkts.extend(group)
    end = fx.last_time_us + 100
    pkts += [
        pkt(True, "FA", cnext, snext, b"", end),
        pkt(False, "FA", snext, cnext + 1, b"", end + 100),
        pkt(True, "A", cnext + 1, snext + 1, b"", end + 200),
    ]
    return pkts


def write_pcap(path: Path, packets: list) -> None:
    from scapy.utils import wrpcap

    packets = sorted(packets, key=lambda p: float(p.time))
    wrpcap(str(path), packets)


@dataclass
class Corpus:
    pcap: Path
    keylog: Path
    sessions: list[SessionFixture] = field(default_factory=list)


def build_corpus(
    directory: Path,
    n_sessions: int,
    seed: int = 1,
    spacing_us: int = 100_000,
    wire: WireOptions | None = None,
    **session_kwargs,
) -> Corpus:
    """``n_sessions`` sequential connections in one pcap plus OpenSSL's keylog."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    keylog = directory / "sslkeylog.txt"
    keylog.write_text("")
    corpus = Corpus(directory / "capture.pcap", keylog)
    packets = []
    for i in range(n_sessions):
        kwargs = dict(session_kwargs)
        kwargs.setdefault("http2", i % 2 == 1)
        fx = generate_session(keylog, i, BASE_TIME_US + i * spacing_us, rng, **kwargs)
        corpus.sessions.append(fx)
        packets.extend(session_packets(fx, wire))
    write_pcap(corpus.pcap, packets)
    return corpus


def write_timestamped_keylog(path: Path, sessions: list[SessionFixture], lateness_us: list[int]) -> None:
    """Keys arrive ``lateness`` after each session's first application-data packet."""
    with open(path, "w") as fh:
        for fx, late in zip(sessions, lateness_us):
            arrival = fx.first_app_time_us + late
            fh.write(f"{arrival}\tCLIENT_RANDOM\t{fx.client_random_hex}\t{fx.master_hex}\n")
