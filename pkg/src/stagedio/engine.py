"""Write-back cache engine.

Turns ``seek``/``pwrite``/``sync``/``close`` issued against a logical shared file
into segment files on node-local storage plus a durable chunk list per rank and
epoch. A session tracks three offsets: ``head_off`` (where the active segment
starts in the shared file), ``cur_off`` (bytes in the active segment) and
``glob_off`` (the file pointer in the shared file).
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import chunklist
from .chunklist import ChunkRecord
from .errors import (
    ArgumentError,
    ConflictError,
    ProtocolError,
    SessionClosedError,
    SetupError,
    UnstagedModeError,
    UnsupportedOverlapError,
)
from .naming import (
    CACHE_DIR_ENV,
    READY_DIR,
    SYNCED_DIR,
    ChunkListName,
    EpochId,
    SegmentName,
    target_basename,
)

log = logging.getLogger(__name__)


class Mode(enum.IntFlag):
    RDONLY = 1
    WRONLY = 2
    RDWR = 4
    CREATE = 8
    APPEND = 16


WRITE_MODE = Mode.WRONLY | Mode.CREATE

# Placeholder handles count down from here so they can never alias a real fd.
_placeholders = itertools.count(-1000, -1)
_open_lock = threading.Lock()
_open_keys: set[tuple] = set()


@dataclass
class SegmentHandle:
    path: Path
    target_offset: int
    length: int = 0
    fd: int | None = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return self.path.name


@dataclass
class SessionEntry:
    placeholder_id: int
    target_name: str
    rank: int
    epoch: EpochId
    cache_dir: Path
    active_segment: SegmentHandle | None = None
    head_off: int = 0
    cur_off: int = 0
    glob_off: int = 0
    pending_chunks: list[ChunkRecord] = field(default_factory=list)
    closed: bool = False
    _staged: tuple[Path, Path] | None = field(default=None, repr=False)

    @property
    def basename(self) -> str:
        return target_basename(self.target_name)

    @property
    def ready_dir(self) -> Path:
        return self.cache_dir / READY_DIR

    @property
    def _key(self):
        return (str(self.cache_dir), self.basename, self.rank, self.epoch)


def resolve_cache_dir(cache_dir=None) -> Path:
    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_DIR_ENV)
        if not cache_dir:
            raise SetupError(f"no cache directory given and ${CACHE_DIR_ENV} is unset")
    path = Path(cache_dir).resolve()
    if not path.is_dir():
        raise SetupError(f"cache directory {path} does not exist")
    if not os.access(path, os.W_OK | os.X_OK):
        raise SetupError(f"cache directory {path} is not writable")
    return path


def open_session(target_name, rank, cache_dir=None, epoch=None, mode=WRITE_MODE):
    """Open a staged write session; no file is created until the first write."""
    if not target_name:
        raise ArgumentError("target_name must be nonempty")
    if rank < 0:
        raise ArgumentError(f"rank must be >= 0, got {rank}")
    mode = Mode(mode)
    if not mode & Mode.WRONLY or mode & (Mode.RDONLY | Mode.RDWR | Mode.APPEND):
        raise UnstagedModeError(f"mode {mode!r} cannot be staged; only write-only opens are")
    cache = resolve_cache_dir(cache_dir)
    (cache / READY_DIR).mkdir(exist_ok=True)
    entry = SessionEntry(
        next(_placeholders), target_name, rank, epoch or EpochId.fresh(), cache
    )
    listname = str(ChunkListName(entry.basename, entry.epoch, rank))
    if (cache / READY_DIR / listname).exists() or (cache / SYNCED_DIR / listname).exists():
        raise ConflictError(f"{listname} was already published")
    with _open_lock:
        if entry._key in _open_keys:
            raise ConflictError(f"session {entry._key} is already open")
        _open_keys.add(entry._key)
    return entry


def _check_open(entry):
    if entry.closed:
        raise SessionClosedError(f"session {entry.placeholder_id} is closed")


def _seal(entry):
    seg = entry.active_segment
    if seg is None:
        return
    os.fsync(seg.fd)
    os.close(seg.fd)
    seg.fd = None
    entry.pending_chunks.insert(0, ChunkRecord(seg.name, entry.head_off, entry.cur_off))
    entry.active_segment = None
    entry.head_off = entry.cur_off = 0


def seek(entry, new_global_offset):
    _check_open(entry)
    if new_global_offset < 0:
        raise ArgumentError(f"negative seek offset {new_global_offset}")
    if entry.active_segment is not None and not (
        entry.head_off <= new_global_offset <= entry.head_off + entry.cur_off
    ):
        _seal(entry)
    entry.glob_off = new_global_offset
    return entry


def _host_for(entry, lo, hi):
    """Pick the segment a write of [lo, hi) lands in, or None for a new one.

    The active segment accepts writes starting anywhere in [head, end]; a sealed
    segment is reopened only for writes starting strictly inside it. Whatever the
    host, the written range may not touch any other segment of this epoch.
    """
    active = None
    if entry.active_segment is not None:
        active = ChunkRecord(entry.active_segment.name, entry.head_off, entry.cur_off)
    host = None
    if active is not None and active.offset <= lo <= active.end:
        host = active
    else:
        host = next((r for r in entry.pending_chunks if r.offset <= lo < r.end), None)
    for other in ([active] if active else []) + entry.pending_chunks:
        if other is not host and other.offset < hi and lo < other.end:
            raise UnsupportedOverlapError(
                f"write [{lo}, {hi}) crosses segment {other.segment_name} "
                f"[{other.offset}, {other.end})"
            )
    return host, host is not None and host is active


def _reopen(entry, record):
    entry.pending_chunks.remove(record)
    path = entry.cache_dir / record.segment_name
    fd = os.open(path, os.O_WRONLY)
    entry.active_segment = SegmentHandle(path, record.offset, record.length, fd)
    entry.head_off, entry.cur_off = record.offset, record.length


def _create(entry, offset):
    name = SegmentName(entry.basename, entry.epoch, entry.rank, offset)
    path = entry.cache_dir / str(name)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    entry.active_segment = SegmentHandle(path, offset, 0, fd)
    entry.head_off, entry.cur_off = offset, 0


def _pwrite_all(fd, data, pos):
    view = memoryview(data)
    while view:
        n = os.pwrite(fd, view, pos)
        view, pos = view[n:], pos + n


def pwrite(entry, data, length=None, *, offset=None):
    """Write ``data`` at the session's global file pointer (or ``offset``)."""
    _check_open(entry)
    if offset is not None:
        seek(entry, offset)
    data = memoryview(data).cast("B")
    if length is not None:
        if length < 0 or length > len(data):
            raise ArgumentError(f"length {length} out of range for {len(data)} bytes")
        data = data[:length]
    n = len(data)
    if n == 0:
        return entry
    lo, hi = entry.glob_off, entry.glob_off + n
    host, in_active = _host_for(entry, lo, hi)
    if not in_active:
        _seal(entry)
        if host is not None:
            _reopen(entry, host)
        else:
            _create(entry, lo)
    seg = entry.active_segment
    _pwrite_all(seg.fd, data, lo - entry.head_off)
    entry.cur_off = max(entry.cur_off, hi - entry.head_off)
    seg.length = entry.cur_off
    entry.glob_off = hi
    return entry


def _stage(entry):
    """Seal and durably write the pending chunk list under its temp name."""
    _seal(entry)
    chunklist.fsync_dir(entry.cache_dir)
    name = ChunkListName(entry.basename, entry.epoch, entry.rank)
    temp, final = entry.cache_dir / name.temp, entry.ready_dir / str(name)
    chunklist.write_durable(temp, entry.pending_chunks)
    entry._staged = (temp, final)
    return temp


def _publish(entry):
    temp, final = entry._staged
    chunklist.publish(temp, final)
    entry._staged = None
    return final


def stage_sync(entry, coordinated_new_epoch):
    _check_open(entry)
    if coordinated_new_epoch != entry.epoch.next():
        raise ProtocolError(
            f"epoch {coordinated_new_epoch} does not follow {entry.epoch} on rank {entry.rank}"
        )
    return _stage(entry)


def finish_sync(entry, coordinated_new_epoch):
    final = _publish(entry)
    with _open_lock:
        _open_keys.discard(entry._key)
        entry.pending_chunks = []
        entry.epoch = coordinated_new_epoch
        _open_keys.add(entry._key)
    return final


def sync_epoch(entry, coordinated_new_epoch):
    """Publish this epoch's chunk list and move the session to the next epoch.

    The file pointer is kept; later segments carry the new epoch in their names.
    Returns the published chunk-list path.
    """
    stage_sync(entry, coordinated_new_epoch)
    return finish_sync(entry, coordinated_new_epoch)


def stage_close(entry):
    _check_open(entry)
    return _stage(entry)


def finish_close(entry):
    final = _publish(entry)
    entry.closed = True
    with _open_lock:
        _open_keys.discard(entry._key)
    return final


def close_session(entry):
    """Seal, persist and publish the chunk list; returns its path in the watch dir."""
    stage_close(entry)
    return finish_close(entry)


def abandon(entry):
    """Drop a session without publishing anything (simulated rank crash)."""
    if entry.active_segment is not None and entry.active_segment.fd is not None:
        os.close(entry.active_segment.fd)
        entry.active_segment.fd = None
    entry.closed = True
    with _open_lock:
        _open_keys.discard(entry._key)
