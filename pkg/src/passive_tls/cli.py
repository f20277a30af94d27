"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
from pathlib import Path
from typing import Sequence

from .analysis_sink import AnalysisSink
from .bench import REFERENCE_OVERHEAD, run_bench
from .engine import EngineConfig, format_ms, format_rate, run_capture, sweep_delays, sweep_tsv
from .forwarder import Forwarder, ForwarderAuthError, build_config, read_config_file
from .keystore import KeyStore
from .transport import parse_address, server_context

log = logging.getLogger("passive_tls")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def parse_delays(delays: str | None, range_spec: str | None) -> list[int]:
    """Delay list in milliseconds -> microseconds. ``START:STOP:STEP`` includes STOP."""
    if bool(delays) == bool(range_spec):
        raise UsageError("give exactly one of --delays or --range")
    try:
        if delays:
            values = [float(x) for x in delays.split(",") if x.strip()]
        else:
            start, stop, step = (float(x) for x in range_spec.split(":"))  # type: ignore[union-attr]
            if step <= 0 or stop < start:
                raise UsageError("--range needs STEP > 0 and STOP >= START")
            n = int(round((stop - start) / step))
            values = [start + i * step for i in range(n + 1) if start + i * step <= stop + 1e-9]
    except ValueError as exc:
        raise UsageError(f"bad delay specification: {exc}") from None
    if not values or any(v < 0 for v in values):
        raise UsageError("delays must be non-negative")
    return [int(round(v * 1000)) for v in values]


def _write_kv(path: Path, rows: Sequence[tuple[str, object]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("key\tvalue\n")
        for key, value in rows:
            if isinstance(value, float) or value is None:
                value = format_rate(value)  # type: ignore[arg-type]
            fh.write(f"{key}\t{value}\n")


def cmd_decrypt(args: argparse.Namespace) -> int:
    capture = _existing(args.capture, "capture")
    keylog = _existing(args.keylog, "keylog")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = KeyStore.from_file(keylog)
    dump_dir = out / "payloads" if args.dump_payloads else None
    with AnalysisSink(out / "cleartext.log", dump_dir) as sink:
        config = EngineConfig(use_key_arrival=False, seq_from_nonce=not args.no_seq_from_nonce, cleartext_sink=sink)
        if args.filter:
            from .wire_capture import open_capture

            report = run_capture(open_capture(capture, args.filter), store, config)
        else:
            report = run_capture(capture, store, config)
    summary = report.summary()
    _write_kv(out / "summary.tsv", list(summary.items()))
    with open(out / "sessions.tsv", "w", encoding="utf-8") as fh:
        fh.write("flow\tphase\tclient_random\trecords\trecords_decrypted\tauth_failed\tbytes\tbytes_decrypted\tfully_decrypted\tprotocol\n")
        for s in report.sessions:
            cr = s.summary.client_random.hex() if s.summary.client_random else "-"
            st = s.stats
            fh.write(
                f"{s.flow}\t{s.phase.value}\t{cr}\t{st.records_total}\t{st.records_decrypted}\t{st.records_auth_failed}"
                f"\t{st.tls_payload_bytes_total}\t{st.tls_payload_bytes_decrypted}\t{'T' if st.fully_decrypted else 'F'}"
                f"\t{sink.protocol_of(s.conn_id).value}\n"
            )
    for key, value in summary.items():
        print(f"{key}\t{format_rate(value) if isinstance(value, float) or value is None else value}")
    return EXIT_OK


def cmd_simulate_delay(args: argparse.Namespace) -> int:
    capture = _existing(args.capture, "capture")
    keylog = _existing(args.keylog, "timestamped keylog")
    delays = parse_delays(args.delays, args.range)
    rows = sweep_delays(capture, KeyStore.from_file(keylog), delays, seq_from_nonce=not args.no_seq_from_nonce)
    text = "".join(sweep_tsv(rows))
    if args.output == "-":
        sys.stdout.write(text)
    else:
        out = Path(args.output)
        out.write_text(text, encoding="ascii")
        if not args.no_plot:
            from .plotting import plot_delay_sweep

            plot_delay_sweep(rows, args.plot or out.with_suffix(".png"))
        for row in rows:
            log.info("delay %s ms: conns %s bytes %s", format_ms(row.delay), format_rate(row.conns), format_rate(row.tls_bytes))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    capture = _existing(args.capture, "capture")
    keylog = _existing(args.keylog, "keylog")
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    parse_only, decrypt = run_bench(capture, keylog, args.repetitions)
    lines = ["field\tparse-only\tdecrypt"]
    for (name, a), (_, b) in zip(parse_only.rows(), decrypt.rows()):
        lines.append(f"{name}\t{a}\t{b}")
    lines.append(f"reference_overhead_factor\t-\t{REFERENCE_OVERHEAD}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        out = Path(args.output)
        out.write_text(text, encoding="ascii")
        if not args.no_plot:
            from .plotting import plot_bench

            plot_bench(parse_only, decrypt, args.plot or out.with_suffix(".png"))
    return EXIT_OK


def cmd_receive_keys(args: argparse.Namespace) -> int:
    from .receiver import KeyReceiver

    try:
        address = parse_address(args.listen, default_host="0.0.0.0")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.plaintext:
        ctx = None
        log.warning("key channel is NOT encrypted or authenticated (--plaintext)")
    else:
        if not (args.cert and args.key and args.ca):
            raise UsageError("--cert, --key and --ca are required unless --plaintext is given")
        ctx = server_context(args.cert, args.key, args.ca)
    store = KeyStore(max_entries=args.max_entries)
    try:
        receiver = KeyReceiver(store, address, ctx, tee=args.tee)
    except OSError as exc:
        log.error("cannot listen on %s: %s", args.listen, exc)
        return EXIT_FAILURE
    signal.signal(signal.SIGTERM, lambda *_: (_ for _ in ()).throw(KeyboardInterrupt()))
    print(f"listening on {receiver.address[0]}:{receiver.address[1]}", flush=True)
    try:
        receiver.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        receiver._server.server_close()
        log.info("received %d entries (%d decode errors)", receiver.received, receiver.decode_errors)
    return EXIT_OK


def cmd_forward(args: argparse.Namespace) -> int:
    values: dict[str, object] = {}
    if args.config:
        try:
            values.update(read_config_file(args.config))
        except (FileNotFoundError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    overrides = {
        "keylog_path": args.keylog,
        "collector": args.collector,
        "mode": args.mode,
        "domain_rules": args.rule,
        "unknown_domain_action": args.unknown_domain_action,
        "cert": args.cert,
        "key": args.key,
        "ca": args.ca,
        "server_hostname": args.server_hostname,
        "plaintext": True if args.plaintext else None,
    }
    values.update({k: v for k, v in overrides.items() if v})
    try:
        config = build_config(values)
        forwarder = Forwarder(config)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    signal.signal(signal.SIGTERM, lambda *_: (_ for _ in ()).throw(KeyboardInterrupt()))
    try:
        forwarder.run_forever()
    except KeyboardInterrupt:
        forwarder.stop()
    except ForwarderAuthError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    st = forwarder.stats
    log.info("sent %d, withheld %d, dropped %d", st.sent, st.withheld, st.dropped)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passive-tls", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decrypt", help="decrypt a capture with preloaded keys")
    p.add_argument("capture")
    p.add_argument("--keylog", required=True, help="SSLKEYLOG file or timestamped TSV")
    p.add_argument("--out-dir", default="passive-tls-out")
    p.add_argument("--dump-payloads", action="store_true", help="write <flow>-<direction>.bin plaintext files")
    p.add_argument("--filter", help="BPF filter (requires scapy and libpcap)")
    p.add_argument("--no-seq-from-nonce", action="store_true")
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("simulate-delay", help="sweep simulated traffic delays")
    p.add_argument("capture")
    p.add_argument("--keylog", required=True, help="timestamped keylog TSV")
    p.add_argument("--delays", help="comma-separated delays in ms")
    p.add_argument("--range", help="START:STOP:STEP in ms, STOP inclusive")
    p.add_argument("-o", "--output", required=True, help="TSV path, or - for stdout")
    p.add_argument("--plot", help="figure path (default: output with .png)")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--no-seq-from-nonce", action="store_true")
    p.set_defaults(func=cmd_simulate_delay)

    p = sub.add_parser("bench", help="parse-only vs decrypt overhead")
    p.add_argument("capture")
    p.add_argument("--keylog", required=True)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("-o", "--output", help="write the report TSV here")
    p.add_argument("--plot", help="figure path (default: output with .png)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("receive-keys", help="accept key material from forwarders")
    p.add_argument("--listen", default="0.0.0.0:4433")
    p.add_argument("--cert")
    p.add_argument("--key")
    p.add_argument("--ca", help="CA that signs forwarder certificates")
    p.add_argument("--plaintext", action="store_true", help="no TLS on the key channel (testing only)")
    p.add_argument("--tee", help="append received keys to this timestamped TSV")
    p.add_argument("--max-entries", type=int, help="LRU cap for the in-memory key store")
    p.set_defaults(func=cmd_receive_keys)

    p = sub.add_parser("forward", help="run the endpoint key forwarder")
    p.add_argument("--config", help="INI file with a [forwarder] section")
    p.add_argument("--keylog", help="SSLKEYLOG file to watch")
    p.add_argument("--collector", help="host:port of the key receiver")
    p.add_argument("--mode", choices=["forward-all", "allowlist", "blocklist"])
    p.add_argument("--rule", action="append", help="domain pattern, repeatable")
    p.add_argument("--unknown-domain-action", choices=["forward", "withhold"])
    p.add_argument("--cert")
    p.add_argument("--key")
    p.add_argument("--ca")
    p.add_argument("--server-hostname")
    p.add_argument("--plaintext", action="store_true")
    p.set_defaults(func=cmd_forward)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"passive-tls {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"passive-tls {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
