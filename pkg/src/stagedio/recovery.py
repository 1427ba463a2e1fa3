"""Offline reconstruction of shared files from surviving node-local caches."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import chunklist
from .backend.s3 import Span
from .errors import IntegrityError, RecoveryError
from .naming import (
    CHUNKS_SUFFIX,
    QUARANTINE_DIR,
    READY_DIR,
    SYNCED_DIR,
    TEMP_SUFFIX,
    parse_chunk_list_name,
)
from .syncer import execute_writeback, plan_writeback

log = logging.getLogger(__name__)


@dataclass
class ListEntry:
    path: Path
    cache_dir: Path
    node: int
    base: str
    counter: int
    nonce: int
    rank: int
    applied: bool = False
    promoted: bool = False


@dataclass
class TargetHistory:
    base: str
    nonce: int
    epochs: dict = field(default_factory=dict)  # counter -> {rank: ListEntry}

    def complete_epochs(self, world_size):
        """Epoch counters in order, up to (excluding) the first incomplete one."""
        done = []
        for counter in sorted(self.epochs):
            if set(self.epochs[counter]) != set(range(world_size)):
                break
            done.append(counter)
        return done

    def incomplete_epochs(self, world_size):
        return [c for c in sorted(self.epochs)
                if set(self.epochs[c]) != set(range(world_size))]

    def skipped_epochs(self, world_size):
        """Everything past the consistency point, complete or not."""
        done = len(self.complete_epochs(world_size))
        return sorted(self.epochs)[done:]


@dataclass
class Inventory:
    cache_dirs: list
    targets: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    anomalies: list = field(default_factory=list)
    promoted: list = field(default_factory=list)

    def report(self, world_size):
        lines = []
        for t in self.targets:
            complete = t.complete_epochs(world_size)
            point = f"epoch {complete[-1]}" if complete else "none"
            lines.append(f"target {t.base} nonce {t.nonce:016x}: "
                         f"{len(t.epochs)} epoch(s), consistency point {point}")
            for c in sorted(t.epochs):
                ranks = t.epochs[c]
                missing = sorted(set(range(world_size)) - set(ranks))
                if c in complete:
                    state = "complete"
                elif missing:
                    state = f"INCOMPLETE, missing ranks {missing}"
                else:
                    state = "after gap"
                pending = sum(not e.applied for e in ranks.values())
                lines.append(f"  epoch {c}: {len(ranks)} list(s), {pending} pending, {state}")
        lines += [f"anomaly: {a}" for a in self.anomalies]
        lines += [f"promoted: {p}" for p in self.promoted]
        return "\n".join(lines)


def scan(cache_dirs, promote=True):
    """Inventory every chunk list and segment in the given caches.

    Temp-named lists whose footer verifies were flushed but never renamed (a
    crash between the two steps); they are promoted into the watch directory
    unless ``promote`` is false. Nothing here is fatal: defects become anomalies.
    """
    inv = Inventory([Path(d) for d in cache_dirs])
    histories = {}
    for node, cache in enumerate(inv.cache_dirs):
        if not cache.is_dir():
            inv.anomalies.append(f"cache {cache} is missing")
            continue
        found = []
        for p in sorted(cache.iterdir()):
            if p.name.endswith(CHUNKS_SUFFIX + TEMP_SUFFIX):
                if not chunklist.is_valid(p):
                    inv.anomalies.append(f"incomplete temp list {p}")
                    continue
                dest = cache / READY_DIR / p.name[: -len(TEMP_SUFFIX)]
                if promote:
                    dest.parent.mkdir(exist_ok=True)
                    os.replace(p, dest)
                    chunklist.fsync_dir(dest.parent)
                    found.append((dest, False, True))
                else:
                    found.append((p, False, True))
                inv.promoted.append(str(dest))
            elif p.name.endswith(".seg"):
                inv.segments.append(p)
        for sub, applied in ((READY_DIR, False), (SYNCED_DIR, True)):
            d = cache / sub
            if d.is_dir():
                found += [(p, applied, False) for p in sorted(d.iterdir())
                          if p.name.endswith(CHUNKS_SUFFIX)]
        q = cache / QUARANTINE_DIR
        if q.is_dir():
            inv.anomalies += [f"quarantined list {p}" for p in sorted(q.iterdir())]
        for path, applied, promoted in found:
            if not applied and not chunklist.is_valid(path):
                inv.anomalies.append(f"corrupt list {path}")
                continue
            name = parse_chunk_list_name(path.name)
            entry = ListEntry(path, cache, node, name.base, name.epoch.counter,
                              name.epoch.job_nonce, name.rank, applied, promoted)
            hist = histories.setdefault((name.base, entry.nonce),
                                        TargetHistory(name.base, entry.nonce))
            slot = hist.epochs.setdefault(entry.counter, {})
            if entry.rank in slot:
                inv.anomalies.append(f"duplicate list for rank {entry.rank}: {path}")
                continue
            slot[entry.rank] = entry

    def first_seen(h):
        return min(os.stat(e.path).st_mtime_ns for ranks in h.epochs.values()
                   for e in ranks.values())

    inv.targets = sorted(histories.values(), key=lambda h: (first_seen(h), h.base))
    return inv


def _records(entry):
    try:
        records = chunklist.read(entry.path)
    except IntegrityError as exc:
        raise RecoveryError(f"{entry.path}: {exc}") from exc
    for r in records:
        seg = entry.cache_dir / r.segment_name
        if not seg.exists() or seg.stat().st_size < r.length:
            raise RecoveryError(f"segment {seg} referenced by {entry.path.name} is missing")
    return records


@dataclass
class RecoveryResult:
    consistency_points: dict = field(default_factory=dict)  # base -> last complete counter
    replayed: list = field(default_factory=list)
    skipped_epochs: dict = field(default_factory=dict)


def recover(inventory, backend, world_size, retries=5, backoff=0.1):
    """Replay complete epochs, oldest first, onto ``backend``.

    Lists the live syncer already acknowledged are not replayed (POSIX); an
    object store gets the whole image rebuilt from every complete epoch.
    Inputs are left untouched, so running this twice yields the same bytes.
    """
    result = RecoveryResult()
    for hist in inventory.targets:
        complete = hist.complete_epochs(world_size)
        skipped = hist.skipped_epochs(world_size)
        if skipped:
            result.skipped_epochs[hist.base] = skipped
            log.warning("%s: skipping epochs %s; stopping at %s", hist.base, skipped,
                        complete[-1] if complete else None)
        if not complete:
            continue
        result.consistency_points[hist.base] = complete[-1]
        entries = [hist.epochs[c][r] for c in complete for r in sorted(hist.epochs[c])]
        if not any(not e.applied for e in entries):
            continue
        if backend.kind == "s3":
            node_spans = {}
            for e in entries:
                for r in _records(e):
                    node_spans.setdefault(e.node, []).append(
                        Span(r.offset, r.length, str(e.cache_dir / r.segment_name),
                             e.counter, e.node))
            backend.upload_image(hist.base, node_spans)
            result.replayed += [e.path.name for e in entries]
            continue
        for e in entries:
            if e.applied:
                continue
            plan = plan_writeback(_records(e), e.path)
            execute_writeback(plan, backend, e.cache_dir, retries, backoff)
            result.replayed.append(e.path.name)
    return result
