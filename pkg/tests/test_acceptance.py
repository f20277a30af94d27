"""Acceptance criteria, one test each. Run with ``pytest tests/test_acceptance.py``."""

import random
import statistics
import threading
import time

import pytest

from oracles import prf as oracle_prf
from passive_tls.analysis_sink import AnalysisSink
from passive_tls.bench import BenchMode, run_bench
from passive_tls.cli import main
from passive_tls.crypto import tls_prf
from passive_tls.engine import Engine, EngineConfig, EventKind, sweep_delays, sweep_tsv
from passive_tls.flows import Direction
from passive_tls.forwarder import Forwarder, ForwarderConfig
from passive_tls.keystore import KeyStore, now_micros
from passive_tls.receiver import KeyReceiver
from passive_tls.transport import server_context
from passive_tls.wire_capture import Frame, reassemble
from tlsfixtures import build_corpus, session_packets, write_timestamped_keylog

pytestmark = pytest.mark.acceptance


def test_1_prf_matches_oracle(criterion):
    with criterion("1 PRF equals independent HMAC-SHA384 P_hash oracle") as d:
        rng = random.Random(2024)
        start = time.perf_counter()
        n = 200
        for _ in range(n):
            secret = rng.randbytes(rng.randint(1, 64))
            seed = rng.randbytes(rng.randint(0, 128))
            label = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz ") for _ in range(rng.randint(0, 16)))
            out_len = rng.randint(1, 256)
            assert tls_prf(secret, label, seed, out_len) == oracle_prf(secret, label.encode(), seed, out_len)
        elapsed = time.perf_counter() - start
        d["inputs"] = n
        assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_2_end_to_end_fixture(criterion, tmp_path):
    with criterion("2 cmd_decrypt recovers fixture plaintext byte-for-byte") as d:
        start = time.perf_counter()
        corpus = build_corpus(tmp_path / "fx", 6, seed=77)
        out = tmp_path / "out"
        rc = main(["decrypt", str(corpus.pcap), "--keylog", str(corpus.keylog), "--out-dir", str(out), "--dump-payloads"])
        elapsed = time.perf_counter() - start
        assert rc == 0
        total = 0
        for fx in corpus.sessions:
            slug = f"{fx.client_ip}_{fx.client_port}-{fx.server_ip}_{fx.server_port}"
            assert (out / "payloads" / f"{slug}-c2s.bin").read_bytes() == fx.c2s_plain
            assert (out / "payloads" / f"{slug}-s2c.bin").read_bytes() == fx.s2c_plain
            total += len(fx.c2s_plain) + len(fx.s2c_plain)
        summary = dict(l.split("\t") for l in (out / "summary.tsv").read_text().splitlines()[1:])
        assert int(summary["tls_payload_bytes_decrypted"]) == int(summary["tls_payload_bytes_total"]) == total
        d["sessions"] = len(corpus.sessions)
        d["bytes"] = total
        assert elapsed < 10.0, f"took {elapsed:.2f}s"


def _frames(packets) -> list[Frame]:
    return [Frame(int(round(float(p.time) * 1e6)), 1, bytes(p)) for p in sorted(packets, key=lambda p: float(p.time))]


def _run_events(fx, store):
    """Decrypt one session; return [(direction, event)] for application-data records."""
    engine = Engine(store, EngineConfig(use_key_arrival=False))
    out = []
    for chunk in reassemble(_frames(session_packets(fx))):
        for ev in engine.feed_chunk(chunk):
            if ev.kind in (EventKind.PLAINTEXT, EventKind.AUTH_FAILED) or ev.reason == "missing-key":
                out.append(ev)
    return out


def test_3_tamper_detection(criterion, tmp_path):
    with criterion("3 single-byte tampering fails auth for that record only") as d:
        corpus = build_corpus(tmp_path / "fx", 1, seed=3, http2=False)
        fx = corpus.sessions[0]
        store = KeyStore.from_file(corpus.keylog)
        clean = _run_events(fx, store)
        assert all(ev.kind is EventKind.PLAINTEXT for ev in clean)
        app = [i for i, f in enumerate(fx.flights) if f.app_data]
        target = min(app, key=lambda i: len(fx.flights[i].data))  # the short request record
        original = fx.flights[target].data
        target_rank = app.index(target)
        flips = 0

        def check(flight_index: int, rank: int, pos: int) -> None:
            data = bytearray(fx.flights[flight_index].data)
            data[pos] ^= 0x01
            saved = fx.flights[flight_index].data
            fx.flights[flight_index].data = bytes(data)
            try:
                events = _run_events(fx, store)
            finally:
                fx.flights[flight_index].data = saved
            assert len(events) == len(clean)
            for k, (ev, ref) in enumerate(zip(events, clean)):
                if k == rank:
                    assert ev.kind is EventKind.AUTH_FAILED and ev.data == b"", f"byte {pos} of record {rank}"
                else:
                    assert ev.kind is EventKind.PLAINTEXT and ev.data == ref.data

        for pos in range(5, len(original)):  # every byte after the 5-byte record header
            check(target, target_rank, pos)
            flips += 1
        rng = random.Random(9)
        for rank, i in enumerate(app):  # one random byte in every other record
            if i != target:
                check(i, rank, rng.randrange(5, len(fx.flights[i].data)))
                flips += 1
        d["record_bytes"] = len(original) - 5
        d["flips"] = flips


def test_4_delay_sweep_properties(criterion, tmp_path):
    with criterion("4 delay sweep monotone, saturates at max lateness, bytes > conns at 0") as d:
        start = time.perf_counter()
        corpus = build_corpus(tmp_path / "fx", 60, seed=44)
        rng = random.Random(45)
        # lateness relative to the first application-data record: uniform on [-2 ms, 12 ms]
        lateness = [rng.randrange(-2000, 12_001) for _ in corpus.sessions]
        keys = tmp_path / "keys.tsv"
        write_timestamped_keylog(keys, corpus.sessions, lateness)
        max_late = max(lateness)
        delays = sorted(set(range(0, 20_001, 250)) | {max_late})
        rows = sweep_delays(corpus.pcap, KeyStore.from_file(keys), delays)
        conns = [r.conns for r in rows]
        byte_rates = [r.tls_bytes for r in rows]
        assert conns == sorted(conns), "conns not monotone"
        assert byte_rates == sorted(byte_rates), "bytes not monotone"
        at_max = delays.index(max_late)
        assert conns[at_max] == 1.0 and all(c == 1.0 for c in conns[at_max:])
        assert conns[at_max - 1] < 1.0
        duration = {i: fx.last_time_us - fx.first_app_time_us for i, fx in enumerate(corpus.sessions)}
        assert any(0 < lateness[i] < duration[i] for i in duration), "no key arrives mid-connection"
        assert byte_rates[0] > conns[0]
        d["sessions"] = len(corpus.sessions)
        d["max_lateness_ms"] = max_late / 1000
        d["at_0ms"] = f"{conns[0]:.3f}/{byte_rates[0]:.3f}"
        assert time.perf_counter() - start < 30


def test_5_bench_overhead(criterion, tmp_path):
    with criterion("5 decrypt mode slower than parse-only, finite overhead factor") as d:
        corpus = build_corpus(tmp_path / "fx", 20, seed=55, response_records=6, record_size=16000)
        parse_only, decrypt = run_bench(corpus.pcap, corpus.keylog, repetitions=5)
        assert parse_only.mode is BenchMode.PARSE_ONLY and decrypt.mode is BenchMode.DECRYPT
        assert decrypt.wall_time > parse_only.wall_time
        assert decrypt.overhead_factor == decrypt.overhead_factor and decrypt.overhead_factor < float("inf")
        assert decrypt.decrypted_bytes == decrypt.bytes_sent_s + decrypt.bytes_received_r > 0
        assert parse_only.decrypted_bytes == 0
        d["factor"] = f"{decrypt.overhead_factor:.2f}"
        d["reference"] = "2.5"


def test_6_forwarder_latency(criterion, tmp_path, pki):
    with criterion("6 1000 keylog lines delivered once, in order, median latency < 40 ms") as d:
        n = 1000
        arrived: list = []
        written: dict[bytes, int] = {}
        s, c = pki["server"], pki["client"]
        store = KeyStore()
        with KeyReceiver(store, ("127.0.0.1", 0), server_context(s.cert, s.key, s.ca), on_entry=arrived.append) as rx:
            keylog = tmp_path / "sslkeylog.txt"
            keylog.write_text("")
            cfg = ForwarderConfig(keylog, rx.address, cert=c.cert, key=c.key, ca=c.ca, server_hostname="localhost")
            fwd = Forwarder(cfg).start()
            time.sleep(0.2)  # let the watcher settle
            start = time.perf_counter()
            with open(keylog, "a") as fh:
                for i in range(n):
                    cr = (i + 1).to_bytes(32, "big")
                    line = f"CLIENT_RANDOM {cr.hex()} {(i + 7).to_bytes(48, 'big').hex()}\n"
                    written[cr] = now_micros()
                    fh.write(line)
                    fh.flush()
                    time.sleep(0.002)
            deadline = time.time() + 20
            while len(arrived) < n and time.time() < deadline:
                time.sleep(0.01)
            time.sleep(0.2)  # would expose late duplicates
            fwd.stop()
            elapsed = time.perf_counter() - start
        assert len(arrived) == n, f"{len(arrived)} of {n} delivered"
        assert [e.client_random for e in arrived] == list(written), "order or duplicates"
        assert store.stats.duplicates == 0 and fwd.stats.sent == n
        latencies = [(e.arrival_time - written[e.client_random]) / 1000 for e in arrived]
        median = statistics.median(latencies)
        d["median_ms"] = f"{median:.2f}"
        d["p99_ms"] = f"{sorted(latencies)[int(0.99 * n)]:.2f}"
        assert median < 40
        assert elapsed < 30


def test_7_determinism_and_conservation(criterion, tmp_path):
    with criterion("7 simulate-delay byte-identical across runs, constant total bytes") as d:
        corpus = build_corpus(tmp_path / "fx", 20, seed=66)
        rng = random.Random(67)
        keys = tmp_path / "keys.tsv"
        write_timestamped_keylog(keys, corpus.sessions, [rng.randrange(0, 15_000) for _ in corpus.sessions])
        outs = []
        for run in range(2):
            out = tmp_path / f"run{run}.tsv"
            rc = main(["simulate-delay", str(corpus.pcap), "--keylog", str(keys), "--range", "0:20:0.5", "-o", str(out), "--no-plot"])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        rows = sweep_delays(corpus.pcap, KeyStore.from_file(keys), [int(x * 500) for x in range(41)])
        assert "".join(sweep_tsv(rows)).encode() == outs[0]
        totals = {r.bytes_total for r in rows}
        assert len(totals) == 1
        d["rows"] = len(rows)
        d["bytes_total"] = totals.pop()
