"""Per-node writeback daemon.

The syncer waits for chunk lists to be renamed into the node's watch directory,
takes them strictly in arrival order, merges contiguous records into runs and
writes them to the remote target. Inputs are consumed only after the backend has
acknowledged durability: segments are deleted and the list is parked in
``synced/`` as a tombstone that recovery counts but does not replay.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import chunklist, faults
from .errors import BackendError, IntegrityError, PlanError, WritebackFailed
from .naming import (
    CHUNKS_SUFFIX,
    QUARANTINE_DIR,
    SENTINEL_NAME,
    SYNCED_DIR,
    parse_chunk_list_name,
)

log = logging.getLogger(__name__)

MAX_READ = 4 * 1024 * 1024


@dataclass(frozen=True)
class WritebackEvent:
    chunk_list_path: Path
    arrival_seq: int

    @property
    def is_sentinel(self):
        return self.chunk_list_path.name == SENTINEL_NAME


@dataclass(frozen=True)
class Run:
    target_offset: int
    total_length: int
    spans: tuple  # ChunkRecords, in target order

    @property
    def end(self):
        return self.target_offset + self.total_length


@dataclass
class WritebackPlan:
    target_name: str
    runs: list = field(default_factory=list)

    @property
    def total_bytes(self):
        return sum(r.total_length for r in self.runs)


@dataclass
class SyncerConfig:
    retain: bool = False
    poll_interval: float = 0.1
    use_notify: bool = True
    retries: int = 5
    backoff: float = 0.1
    # S3 only
    node: int = 0
    nodes: int = 1
    world_size: int | None = None
    exchange_dir: Path | None = None
    collective_timeout: float = 120.0


class EventSource:
    """FIFO stream of arrivals in one watch directory.

    Order always comes from a directory rescan sorted by ctime (rename updates
    it), so two sources can never disagree about arrival order. Filesystem
    notifications only wake the rescan early; without them it runs every
    ``poll_interval``.
    """

    def __init__(self, watch_dir, poll_interval=0.1, use_notify=True):
        self.watch_dir = Path(watch_dir)
        self.poll_interval = poll_interval
        self._queue = queue.Queue()
        self._seen = set()
        self._seq = 0
        self._lock = threading.Lock()
        self._wake = threading.Event()
        self._closers = []
        if use_notify:
            self._start_notify()
        self.rescan()

    def _start_notify(self):
        try:
            self._start_inotify()
        except (ImportError, OSError) as exc:
            log.debug("raw inotify unavailable (%s); trying watchdog observer", exc)
            try:
                self._start_observer()
            except (ImportError, OSError) as exc2:
                log.warning("filesystem notifications unavailable (%s); polling", exc2)

    def _start_inotify(self):
        # watchdog's observer holds rename events back ~0.5 s to pair them;
        # the bare inotify reader reports them at once
        from watchdog.observers.inotify_c import Inotify

        ino = Inotify(os.fsencode(self.watch_dir), recursive=False)
        wake = self._wake

        def pump():
            while True:
                try:
                    events = ino.read_events()
                except OSError:
                    return
                if not events:
                    return
                wake.set()

        threading.Thread(target=pump, daemon=True, name=f"inotify:{self.watch_dir}").start()
        self._closers.append(ino.close)

    def _start_observer(self):
        from watchdog.events import FileSystemEventHandler
        from watchdog.observers import Observer

        wake = self._wake

        class Handler(FileSystemEventHandler):
            def on_any_event(self, event):
                wake.set()

        observer = Observer()
        observer.schedule(Handler(), str(self.watch_dir), recursive=False)
        observer.start()
        self._closers.append(observer.stop)

    def _offer(self, path):
        name = path.name
        if not (name.endswith(CHUNKS_SUFFIX) or name == SENTINEL_NAME):
            return
        with self._lock:
            if name in self._seen:
                return
            self._seen.add(name)
            self._seq += 1
            self._queue.put(WritebackEvent(path, self._seq))

    def rescan(self):
        found = []
        for p in self.watch_dir.iterdir():
            try:
                found.append((p.stat().st_ctime_ns, p.name == SENTINEL_NAME, p.name, p))
            except FileNotFoundError:
                continue
        # the sentinel always sorts after lists that arrived in the same tick
        for *_, p in sorted(found, key=lambda t: t[:3]):
            self._offer(p)

    def get(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                return self._queue.get_nowait()
            except queue.Empty:
                pass
            self._wake.clear()
            self.rescan()
            if not self._queue.empty():
                continue
            if deadline is not None and time.monotonic() > deadline:
                return None
            self._wake.wait(self.poll_interval)

    def pending(self):
        """Events queued but not yet taken, without removing them."""
        self.rescan()
        with self._queue.mutex:
            return list(self._queue.queue)

    def close(self):
        for close in self._closers:
            try:
                close()
            except OSError:
                pass
        self._closers = []


def quarantine(path, reason):
    qdir = Path(path).parent.parent / QUARANTINE_DIR
    qdir.mkdir(exist_ok=True)
    dest = qdir / Path(path).name
    os.replace(path, dest)
    log.error("quarantined %s: %s", Path(path).name, reason)
    return dest


def load_chunk_list(path, check_segments=True):
    """Read and verify a chunk list; bad lists are moved to ``quarantine/``."""
    path = Path(path)
    try:
        records = chunklist.read(path)
        if check_segments:
            cache_dir = path.parent.parent
            for r in records:
                seg = cache_dir / r.segment_name
                if not seg.exists() or seg.stat().st_size < r.length:
                    raise IntegrityError(f"segment {r.segment_name} missing or short")
    except IntegrityError as exc:
        quarantine(path, exc)
        raise
    return records


def plan_writeback(records, source):
    """Sort records, merge contiguous ones into runs.

    ``source`` is the chunk list path or name; the target is its base name with
    the epoch/rank suffix stripped.
    """
    target = parse_chunk_list_name(str(source)).base
    plan = WritebackPlan(target)
    spans = []
    for rec in sorted(records, key=lambda r: r.offset):
        if spans and rec.offset < spans[-1].end:
            raise PlanError(f"records overlap at {rec.offset} in {Path(str(source)).name}")
        if spans and rec.offset == spans[-1].end:
            spans.append(rec)
            continue
        if spans:
            plan.runs.append(Run(spans[0].offset, spans[-1].end - spans[0].offset, tuple(spans)))
        spans = [rec]
    if spans:
        plan.runs.append(Run(spans[0].offset, spans[-1].end - spans[0].offset, tuple(spans)))
    return plan


def _write_run(writer, run, cache_dir):
    pos = run.target_offset
    for rec in run.spans:
        with open(Path(cache_dir) / rec.segment_name, "rb") as fh:
            left = rec.length
            while left:
                chunk = fh.read(min(left, MAX_READ))
                if not chunk:
                    raise IntegrityError(f"segment {rec.segment_name} ended early")
                writer.pwrite(pos, chunk)
                faults.hit("writeback.mid_run", pos=pos, target=run, cache_dir=str(cache_dir))
                pos += len(chunk)
                left -= len(chunk)


def retrying(fn, retries=5, backoff=0.1, what="operation"):
    for attempt in range(retries):
        try:
            return fn()
        except BackendError as exc:
            log.warning("%s failed (attempt %d/%d): %s", what, attempt + 1, retries, exc)
            last = exc
            if attempt + 1 < retries:
                time.sleep(backoff * 2**attempt)
    raise WritebackFailed(f"{what} failed after {retries} attempts: {last}") from last


def execute_writeback(plan, backend, cache_dir, retries=5, backoff=0.1):
    """Write every run at its target offset and return once the backend has flushed.

    Runs are plain overwrites, so a failed run is retried from its start and the
    whole plan can be replayed after a crash.
    """
    writer = retrying(lambda: backend.open_target(plan.target_name), retries, backoff,
                      f"open {plan.target_name}")
    try:
        for run in plan.runs:
            retrying(lambda run=run: _write_run(writer, run, cache_dir), retries, backoff,
                     f"run [{run.target_offset}, {run.end}) of {plan.target_name}")
        retrying(writer.flush, retries, backoff, f"flush {plan.target_name}")
    finally:
        writer.close()


class Syncer:
    def __init__(self, watch_dir, backend, config=None):
        self.watch_dir = Path(watch_dir)
        if not self.watch_dir.is_dir():
            raise FileNotFoundError(f"watch directory {self.watch_dir} does not exist")
        self.cache_dir = self.watch_dir.parent
        self.backend = backend
        self.config = config or SyncerConfig()
        self.processed = []
        self.errors = []
        self.backend_writes = 0
        self._deferred = []
        self._s3 = None
        if backend.kind == "s3":
            from .backend.s3 import S3NodeWriteback

            c = self.config
            self._s3 = S3NodeWriteback(
                backend, c.node, c.exchange_dir or self.cache_dir / "exchange",
                c.world_size or c.nodes, self.cache_dir, c.collective_timeout)

    def _consume(self, list_path, records):
        # tombstone first: a kill after this point leaks segments but never
        # leaves a pending list pointing at deleted ones
        synced = self.cache_dir / SYNCED_DIR
        synced.mkdir(exist_ok=True)
        os.replace(list_path, synced / list_path.name)
        chunklist.fsync_dir(synced)
        if self.config.retain:
            return
        segs = [self.cache_dir / r.segment_name for r in records]
        if self._s3 is not None:
            # later epochs rebuild the whole object from these
            self._deferred.extend(segs)
        else:
            for seg in segs:
                seg.unlink(missing_ok=True)

    def process(self, event):
        """Write back one chunk list. Returns False if the list was quarantined."""
        path = event.chunk_list_path
        faults.hit("syncer.before_consume", path=path, cache_dir=str(self.cache_dir))
        try:
            records = load_chunk_list(path)
        except IntegrityError as exc:
            self.errors.append((path.name, str(exc)))
            return False
        name = parse_chunk_list_name(path.name)
        if self._s3 is not None:
            self._s3.deposit(name.base, name.epoch, name.rank, records, self.cache_dir)
            try:
                self._s3.commit(name.base, name.epoch, pump=self._predeposit)
            except BackendError as exc:
                raise WritebackFailed(str(exc)) from exc
        else:
            plan = plan_writeback(records, path)
            execute_writeback(plan, self.backend, self.cache_dir,
                              self.config.retries, self.config.backoff)
            self.backend_writes += len(plan.runs)
        self._consume(path, records)
        self.processed.append(path.name)
        return True

    def _predeposit(self):
        # publishing metadata early cannot reorder remote effects
        for ev in self._events.pending():
            if ev.is_sentinel or not ev.chunk_list_path.exists():
                continue
            try:
                records = chunklist.read(ev.chunk_list_path)
            except (IntegrityError, OSError):
                continue
            name = parse_chunk_list_name(ev.chunk_list_path.name)
            self._s3.deposit(name.base, name.epoch, name.rank, records, self.cache_dir)

    def run(self):
        """Serve events until the exit sentinel arrives and the queue is drained."""
        c = self.config
        self._events = EventSource(self.watch_dir, c.poll_interval, c.use_notify)
        try:
            while True:
                event = self._events.get()
                if event.is_sentinel:
                    break
                if event.chunk_list_path.exists():
                    self.process(event)
            # anything that slipped in alongside the sentinel
            for event in self._events.pending():
                if not event.is_sentinel and event.chunk_list_path.exists():
                    self.process(event)
            for seg in self._deferred:
                seg.unlink(missing_ok=True)
            (self.watch_dir / SENTINEL_NAME).unlink(missing_ok=True)
        finally:
            self._events.close()
        return 0


def start_in_thread(syncer):
    """Run ``syncer`` on a daemon thread; exceptions are kept on ``thread.exc``."""

    def target():
        try:
            syncer.run()
        except BaseException as exc:  # noqa: BLE001 - includes SimulatedCrash
            thread.exc = exc
            log.debug("syncer on %s died: %r", syncer.watch_dir, exc)

    thread = threading.Thread(target=target, daemon=True, name=f"syncer:{syncer.watch_dir}")
    thread.exc = None
    thread.start()
    return thread
