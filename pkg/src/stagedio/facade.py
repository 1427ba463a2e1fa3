"""MPI-IO style collective verbs lowered onto the cache engine.

A :class:`JobGroup` describes the simulated job (ranks, nodes, cache directories,
rendezvous). ``file_open`` returns a :class:`StagedFile` holding one engine session
per local rank; the remaining verbs take that handle. Every write reaches the
engine as a ``seek`` followed by ``pwrite`` calls, the only lowering in use.
"""

from __future__ import annotations

import logging
import os
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import engine
from .chunklist import fsync_dir
from .collective import LocalCollective
from .engine import WRITE_MODE, Mode
from .errors import (
    ArgumentError,
    CollectiveError,
    ProtocolError,
    StagedIOError,
    UnstagedModeError,
)
from .naming import CHUNKS_SUFFIX, READY_DIR, SENTINEL_NAME, EpochId

log = logging.getLogger(__name__)

DEFAULT_BACKLOG_LIMIT = 4


@dataclass(frozen=True)
class FileView:
    """Per-rank block layout: block ``k`` of rank ``r`` lands at
    ``displacement + k * stride + r * block_length``."""

    block_length: int
    displacement: int = 0
    stride: int | None = None

    def __post_init__(self):
        if self.displacement < 0 or self.block_length <= 0:
            raise ArgumentError(f"invalid view {self}")
        if self.stride is not None and self.stride < self.block_length:
            raise ArgumentError(f"stride {self.stride} < block length {self.block_length}")

    @classmethod
    def contiguous(cls, block_length, displacement=0):
        return cls(block_length, displacement)

    def stride_for(self, world_size):
        return self.stride if self.stride is not None else world_size * self.block_length

    def block_offset(self, rank, k, world_size):
        return self.displacement + k * self.stride_for(world_size) + rank * self.block_length


@dataclass
class JobGroup:
    world_size: int
    cache_dirs: list
    node_map: dict | None = None
    local_ranks: list | None = None
    collective: object = field(default_factory=LocalCollective)
    stage_prefix: str = ""
    backlog_limit: int | None = DEFAULT_BACKLOG_LIMIT
    backlog_poll: float = 0.005
    cb_buffer_size: int | None = None
    nonce: int | None = None
    next_counter: int = 0
    finalized: bool = False

    def __post_init__(self):
        if self.world_size <= 0 or not self.cache_dirs:
            raise ArgumentError("world_size and cache_dirs must be nonempty")
        self.cache_dirs = [Path(d) for d in self.cache_dirs]
        if self.node_map is None:
            self.node_map = {r: r % len(self.cache_dirs) for r in range(self.world_size)}
        if sorted(self.node_map) != list(range(self.world_size)):
            raise ArgumentError("node_map must list every rank exactly once")
        if any(not 0 <= n < len(self.cache_dirs) for n in self.node_map.values()):
            raise ArgumentError("node_map refers to an unknown node")
        if self.local_ranks is None:
            self.local_ranks = list(range(self.world_size))
        for d in self.cache_dirs:
            (d / READY_DIR).mkdir(parents=True, exist_ok=True)

    @property
    def nodes(self):
        return len(self.cache_dirs)

    def cache_dir_of(self, rank):
        return self.cache_dirs[self.node_map[rank]]

    @property
    def local_nodes(self):
        return sorted({self.node_map[r] for r in self.local_ranks})

    def backlog(self, node):
        return sum(1 for p in (self.cache_dirs[node] / READY_DIR).iterdir()
                   if p.name.endswith(CHUNKS_SUFFIX))


@dataclass
class StagedFile:
    group: JobGroup
    target_name: str
    sessions: dict
    epoch: EpochId
    view: FileView | None = None
    blocks_written: dict = field(default_factory=dict)
    closed: bool = False


def _each_rank(f, fn):
    """Run ``fn(rank, session)`` for every local rank, tagging failures with the rank."""
    for rank, entry in f.sessions.items():
        try:
            fn(rank, entry)
        except StagedIOError as exc:
            raise CollectiveError(str(exc), rank=rank) from exc
        except OSError as exc:
            raise CollectiveError(f"{type(exc).__name__}: {exc}", rank=rank) from exc


def file_open(group, target_name, mode=WRITE_MODE):
    """Collectively open ``target_name``; returns None when it is not staged.

    A None return is the pass-through signal: the path lacks the staging prefix
    and the caller should write to remote storage directly.
    """
    mode = Mode(mode)
    if mode & (Mode.RDONLY | Mode.RDWR) or not mode & Mode.WRONLY:
        raise UnstagedModeError(f"unstaged mode {mode!r}: only write-only files are staged")
    if group.stage_prefix and not target_name.startswith(group.stage_prefix):
        return None
    if group.nonce is None:
        group.nonce = group.collective.bcast(secrets.randbits(64))
    epoch = EpochId(group.next_counter, group.nonce)
    f = StagedFile(group, target_name, {}, epoch)
    for rank in group.local_ranks:
        try:
            f.sessions[rank] = engine.open_session(
                target_name, rank, group.cache_dir_of(rank), epoch, mode
            )
        except StagedIOError as exc:
            for entry in f.sessions.values():
                engine.abandon(entry)
            raise CollectiveError(str(exc), rank=rank) from exc
    group.collective.barrier()
    return f


def file_set_view(f, view):
    """Install a view; ``view`` is one FileView or a mapping rank -> FileView."""
    views = view if isinstance(view, dict) else {r: view for r in f.sessions}
    disps = {v.displacement for v in views.values()}
    if len(disps) != 1:
        raise CollectiveError(f"ranks disagree on displacement: {sorted(disps)}")
    chosen = views[min(views)]
    root_disp = f.group.collective.bcast(chosen.displacement)
    if root_disp != chosen.displacement or len({(v.block_length, v.stride) for v in views.values()}) != 1:
        raise CollectiveError("ranks disagree on the file view")
    f.view = chosen
    ws = f.group.world_size
    _each_rank(f, lambda r, e: engine.seek(e, chosen.block_offset(r, 0, ws)))
    f.blocks_written = {r: 0 for r in f.sessions}


def lower_write(entry, offset, data, buffer_size=None):
    """The seek + pwrite sequence one block turns into."""
    engine.seek(entry, offset)
    step = buffer_size or len(data) or 1
    view = memoryview(data)
    for pos in range(0, len(data), step):
        engine.pwrite(entry, view[pos:pos + step])


def file_write_all(f, per_rank_data):
    """Each rank writes its next ``len(data) / block_length`` blocks."""
    if f.view is None:
        raise ProtocolError("file_write_all before file_set_view")
    B, ws = f.view.block_length, f.group.world_size
    for rank, data in per_rank_data.items():
        if rank not in f.sessions:
            raise ArgumentError(f"rank {rank} is not local to this worker")
        if len(data) % B:
            raise ArgumentError(f"rank {rank}: {len(data)} bytes is not a multiple of {B}")

    def write(rank, entry):
        data = memoryview(per_rank_data.get(rank, b""))
        for i in range(len(data) // B):
            k = f.blocks_written[rank]
            lower_write(entry, f.view.block_offset(rank, k, ws), data[i * B:(i + 1) * B],
                        f.group.cb_buffer_size)
            f.blocks_written[rank] = k + 1

    _each_rank(f, write)
    f.group.collective.barrier()


def file_sync(f):
    """Collective sync: publish every rank's chunk list and advance the epoch."""
    group = f.group
    group.collective.barrier()
    new = f.epoch.next()
    if group.collective.bcast(new.counter) != new.counter:
        raise ProtocolError(f"epoch divergence: local counter {new.counter}")
    _each_rank(f, lambda r, e: engine.stage_sync(e, new))
    _each_rank(f, lambda r, e: engine.finish_sync(e, new))
    f.epoch = new
    group.collective.barrier()


def _throttle(group):
    if group.backlog_limit is None:
        return 0.0
    t0 = time.perf_counter()
    for node in group.local_nodes:
        while group.backlog(node) >= group.backlog_limit:
            time.sleep(group.backlog_poll)
    return time.perf_counter() - t0


def file_close(f):
    """Collective close; on return every rank's data is durable in local caches.

    All ranks flush their chunk lists before any is renamed into a watch
    directory. Returns the seconds spent blocked on syncer backlog.
    """
    _each_rank(f, lambda r, e: engine.stage_close(e))
    f.group.collective.barrier()
    _each_rank(f, lambda r, e: engine.finish_close(e))
    f.group.collective.barrier()
    f.closed = True
    f.group.next_counter = max(f.group.next_counter, f.epoch.counter + 1)
    return _throttle(f.group)


def write_sentinel(cache_dir):
    ready = Path(cache_dir) / READY_DIR
    ready.mkdir(parents=True, exist_ok=True)
    if (ready / SENTINEL_NAME).exists():
        return False
    tmp = Path(cache_dir) / f"{SENTINEL_NAME}.{os.getpid()}.tmp"
    tmp.write_bytes(b"")
    os.replace(tmp, ready / SENTINEL_NAME)
    fsync_dir(ready)
    return True


def finalize(group):
    """Tell every local node's syncer to drain and exit. Idempotent."""
    if group.finalized:
        return
    group.collective.barrier()
    for node in group.local_nodes:
        write_sentinel(group.cache_dirs[node])
    group.finalized = True
