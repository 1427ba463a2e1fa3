"""Delimited output and figures for harness reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.4),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def to_csv(rows, out=None):
    """Write dict rows as CSV to ``out`` (path or stream); returns the text if ``out`` is None."""
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if out is None:
        return text
    if hasattr(out, "write"):
        out.write(text)
    else:
        Path(out).write_text(text)
    return text


def plot_segment_bench(rows, path):
    with plt.rc_context(STYLE):
        fig, (ax, rax) = plt.subplots(1, 2, figsize=(9, 3.4))
        sizes = [r["size_kib"] for r in rows]
        ax.plot(sizes, [r["direct_mib_s"] for r in rows], "o-", color="0.6", label="direct")
        ax.plot(sizes, [r["staged_mib_s"] for r in rows], "s-", color="C0", label="staged")
        ax.set(xscale="log", yscale="log", xlabel="segment size (KiB)",
               ylabel="throughput (MiB/s)")
        ax.legend()
        rax.plot(sizes, [r["ratio"] for r in rows], "s-", color="C0")
        rax.axhline(1.0, color="0.6", lw=0.8)
        rax.set(xscale="log", xlabel="segment size (KiB)", ylabel="staged / direct",
                ylim=(0, 1.1 * max(1.0, max(r["ratio"] for r in rows))))
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_append_seek(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        sizes = [r["size_kib"] for r in rows]
        ax.plot(sizes, [r["append_mib_s"] for r in rows], "o-", label="append")
        ax.plot(sizes, [r["seek_mib_s"] for r in rows], "s--", label="seek + write")
        ax.set(xscale="log", yscale="log", xlabel="write size (KiB)", ylabel="MiB/s")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_frequency_sweep(rows, path):
    """Bars of baseline vs staged end-to-end time per output count."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [str(r["outputs"]) for r in rows]
        x = range(len(rows))
        ax.bar([i - 0.2 for i in x], [r["baseline_s"] for r in rows], 0.4, color="0.6",
               label="direct")
        ax.bar([i + 0.2 for i in x], [r["staged_s"] for r in rows], 0.4, color="C0",
               label="staged")
        for i, r in zip(x, rows):
            ax.annotate(f"-{100 * r['improvement']:.0f}%", (i + 0.2, r["staged_s"]),
                        ha="center", va="bottom", fontsize=8)
        ax.set_xticks(list(x), labels)
        ax.set(xlabel="outputs per run", ylabel="end-to-end time (s)")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
