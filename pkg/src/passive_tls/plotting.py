"""Figures written next to the TSV reports."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import REFERENCE_OVERHEAD, BenchReport  # noqa: E402
from .engine import DelaySweepRow  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.alpha": 0.5,
}


def plot_delay_sweep(rows: Sequence[DelaySweepRow], path: str | os.PathLike) -> None:
    xs = [r.delay / 1000 for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(xs, [r.conns if r.conns is not None else float("nan") for r in rows], marker="o", ms=3, label="Connections")
        ax.plot(xs, [r.tls_bytes if r.tls_bytes is not None else float("nan") for r in rows], marker="s", ms=3, label="TLS Bytes")
        ax.set_xlabel("Traffic Delay [ms]")
        ax.set_ylabel("Decryption Success Rate")
        ax.set_ylim(-0.02, 1.02)
        if xs:
            ax.set_xlim(min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_bench(parse_only: BenchReport, decrypt: BenchReport, path: str | os.PathLike) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        labels = ["parse only", "decrypt"]
        ax.bar(labels, [parse_only.wall_time, decrypt.wall_time], color=["0.6", "C0"])
        ax.axhline(parse_only.wall_time * REFERENCE_OVERHEAD, color="C3", ls=":", lw=1, label=f"{REFERENCE_OVERHEAD}x reference")
        ax.set_ylabel("Median wall time [s]")
        ax.set_title(f"overhead factor {decrypt.overhead_factor:.2f}")
        ax.legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
