"""Decryption overhead measurement: parse-only versus full decryption."""

from __future__ import annotations

import enum
import math
import os
import statistics
import time
from dataclasses import dataclass, field

from .analysis_sink import AnalysisSink
from .engine import EngineConfig, RunReport, run_capture
from .keystore import KeyStore

# decryption runtime relative to cleartext analysis, measured on the authors' dataset
REFERENCE_OVERHEAD = 2.5


class BenchMode(enum.Enum):
    PARSE_ONLY = "parse-only"
    DECRYPT = "decrypt"


@dataclass
class BenchReport:
    mode: BenchMode
    wall_time: float
    sessions: int
    bytes_sent_s: int
    bytes_received_r: int
    decrypted_bytes: int
    overhead_factor: float
    samples: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("mode", self.mode.value),
            ("wall_time_s", f"{self.wall_time:.6f}"),
            ("repetitions", str(len(self.samples))),
            ("sessions", str(self.sessions)),
            ("bytes_sent_s", str(self.bytes_sent_s)),
            ("bytes_received_r", str(self.bytes_received_r)),
            ("decrypted_bytes", str(self.decrypted_bytes)),
            ("overhead_factor", f"{self.overhead_factor:.4f}"),
        ]


def _one_pass(capture: str | os.PathLike, store: KeyStore, mode: BenchMode) -> tuple[float, RunReport]:
    if mode is BenchMode.DECRYPT:
        sink = AnalysisSink()
        config = EngineConfig(use_key_arrival=False, cleartext_sink=sink)
    else:
        sink = None
        config = EngineConfig(use_key_arrival=False, decrypt=False)
    start = time.perf_counter()
    report = run_capture(capture, store, config)
    elapsed = time.perf_counter() - start
    if sink is not None:
        sink.close()
    return elapsed, report


def run_bench(
    capture: str | os.PathLike, keys: KeyStore | str | os.PathLike, repetitions: int = 5
) -> tuple[BenchReport, BenchReport]:
    """Time both modes over the same input; the modes alternate per repetition.

    Reports use the median wall time. The decrypt report's
    ``overhead_factor`` is decrypt median / parse-only median.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    store = keys if isinstance(keys, KeyStore) else KeyStore.from_file(keys)
    samples: dict[BenchMode, list[float]] = {m: [] for m in BenchMode}
    last: dict[BenchMode, RunReport] = {}
    for _ in range(repetitions):
        for mode in (BenchMode.PARSE_ONLY, BenchMode.DECRYPT):
            elapsed, report = _one_pass(capture, store, mode)
            samples[mode].append(elapsed)
            last[mode] = report
    medians = {m: statistics.median(v) for m, v in samples.items()}
    base = medians[BenchMode.PARSE_ONLY]
    out = []
    for mode in BenchMode:
        report = last[mode]
        tls = report.tls_sessions
        factor = medians[mode] / base if base > 0 else math.inf
        out.append(
            BenchReport(
                mode=mode,
                wall_time=medians[mode],
                sessions=len(tls),
                bytes_sent_s=sum(s.stats.bytes_client_to_server for s in tls),
                bytes_received_r=sum(s.stats.bytes_server_to_client for s in tls),
                decrypted_bytes=report.bytes_decrypted,
                overhead_factor=factor,
                samples=samples[mode],
            )
        )
    return out[0], out[1]
