"""Segment-overhead microbenchmarks.

``open-write``: open, write one segment, close; staged through the engine versus
a direct ``open/write/fsync/close`` of an ordinary file. Both sides end with the
data durable, so the ratio isolates segment creation and the chunk-list commit.

``append`` / ``seek-write``: one open session receiving a series of writes that
either extend the current segment or land past a gap and start a new one.
"""

from __future__ import annotations

import os
import shutil
import statistics
import time
from pathlib import Path

from .. import engine
from ..naming import EpochId

KiB = 1024
DEFAULT_SIZES_KIB = (1, 4, 16, 64, 256, 1024, 4096, 16384)


def _reps(size, budget=64 * 1024 * KiB, lo=7, hi=201):
    return max(lo, min(hi, budget // max(size, 1)))


def _direct_once(path, buf):
    t0 = time.perf_counter()
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
    try:
        if buf:
            os.write(fd, buf)
        os.fsync(fd)
    finally:
        os.close(fd)
    dt = time.perf_counter() - t0
    os.unlink(path)
    return dt


def _wipe(cache):
    for p in cache.iterdir():
        if p.is_file():
            p.unlink()
    for p in (cache / "ready").iterdir():
        p.unlink()


def _staged_once(cache, buf, epoch):
    t0 = time.perf_counter()
    entry = engine.open_session("bench.dat", 0, cache, epoch)
    engine.pwrite(entry, buf)
    engine.close_session(entry)
    dt = time.perf_counter() - t0
    _wipe(cache)
    return dt


def microbench_segments(sizes_kib=DEFAULT_SIZES_KIB, storage_path=".", reps=None):
    """Rows of ``size_kib, staged_mib_s, direct_mib_s, ratio`` (open-write pattern)."""
    root = Path(storage_path) / "stagedio-bench"
    shutil.rmtree(root, ignore_errors=True)
    cache, direct = root / "cache", root / "direct"
    (cache / "ready").mkdir(parents=True)
    direct.mkdir()
    epoch = EpochId.fresh()
    rows = []
    try:
        for size_kib in sizes_kib:
            size = int(size_kib * KiB)
            buf = os.urandom(size)
            n = reps or _reps(size)
            staged_t, direct_t = [], []
            for _ in range(n):
                # interleave so drift in device speed hits both sides alike
                direct_t.append(_direct_once(direct / "bench.dat", buf))
                staged_t.append(_staged_once(cache, buf, epoch))
                epoch = epoch.next()
            st, dt = statistics.median(staged_t), statistics.median(direct_t)
            rows.append(dict(
                size_kib=size_kib,
                staged_mib_s=size / st / (1024 * KiB) if size else 0.0,
                direct_mib_s=size / dt / (1024 * KiB) if size else 0.0,
                staged_s=st,
                direct_s=dt,
                ratio=dt / st,
                reps=n,
            ))
    finally:
        shutil.rmtree(root, ignore_errors=True)
    return rows


def microbench_append_seek(sizes_kib=(1, 4, 16, 64, 256, 1024, 4096), storage_path=".",
                           writes=100, budget=64 * 1024 * KiB, reps=3):
    """Rows of ``size_kib, append_mib_s, seek_mib_s, ratio`` for one open session."""
    root = Path(storage_path) / "stagedio-bench-as"
    shutil.rmtree(root, ignore_errors=True)
    cache = root / "cache"
    (cache / "ready").mkdir(parents=True)
    epoch = EpochId.fresh()
    rows = []
    try:
        for size_kib in sizes_kib:
            size = int(size_kib * KiB)
            buf = os.urandom(size)
            count = max(4, min(writes, budget // size))
            times = {"append": [], "seek": []}
            for _ in range(reps):
                for mode in ("append", "seek"):
                    t0 = time.perf_counter()
                    entry = engine.open_session("bench.dat", 0, cache, epoch)
                    for i in range(count):
                        if mode == "seek":
                            engine.seek(entry, i * (size + 1))
                        engine.pwrite(entry, buf)
                    engine.close_session(entry)
                    times[mode].append(time.perf_counter() - t0)
                    epoch = epoch.next()
                    _wipe(cache)
            total = count * size / (1024 * KiB)
            a, s = statistics.median(times["append"]), statistics.median(times["seek"])
            rows.append(dict(size_kib=size_kib, append_mib_s=total / a, seek_mib_s=total / s,
                             ratio=a / s, writes=count))
    finally:
        shutil.rmtree(root, ignore_errors=True)
    return rows


def ratio_trend_ok(ratios, max_inversions=1, tolerance=0.05):
    """Non-decreasing, allowing ``max_inversions`` drops of at most ``tolerance`` (relative)."""
    drops = [(a, b) for a, b in zip(ratios, ratios[1:]) if b < a]
    return len(drops) <= max_inversions and all(b >= a * (1 - tolerance) for a, b in drops)
