"""Cache file naming.

Segments are named ``<basename>.e<counter:016x>-<nonce:016x>.r<rank>.o<offset>.seg``
and chunk lists ``<basename>.e<counter:016x>-<nonce:016x>.r<rank>.chunks``. Every
piece of metadata needed to place a segment is recoverable from its name, and
names sort by epoch counter within one target.
"""

from __future__ import annotations

import os
import re
import secrets
from dataclasses import dataclass

SEGMENT_SUFFIX = ".seg"
CHUNKS_SUFFIX = ".chunks"
TEMP_SUFFIX = ".tmp"
RESHUFFLE_SUFFIX = ".reshuf"
SENTINEL_NAME = "__staged_io_exit__"
READY_DIR = "ready"
SYNCED_DIR = "synced"
QUARANTINE_DIR = "quarantine"
CACHE_DIR_ENV = "STAGEDIO_CACHE_DIR"

_EPOCH = r"e(?P<counter>[0-9a-f]{16})-(?P<nonce>[0-9a-f]{16})"
_SEGMENT_RE = re.compile(
    rf"^(?P<base>.+)\.{_EPOCH}\.r(?P<rank>\d+)\.o(?P<offset>\d+)\.seg$"
)
_CHUNKS_RE = re.compile(rf"^(?P<base>.+)\.{_EPOCH}\.r(?P<rank>\d+)\.chunks$")


@dataclass(frozen=True, order=True)
class EpochId:
    """Sync generation shared by all ranks of one job.

    Ordering compares ``counter`` first, so epochs of one job sort in sync order.
    """

    counter: int
    job_nonce: int

    def __post_init__(self):
        if self.counter < 0 or not 0 <= self.job_nonce < 2**64:
            raise ValueError(f"invalid epoch {self.counter}/{self.job_nonce}")

    @classmethod
    def fresh(cls, nonce: int | None = None) -> "EpochId":
        return cls(0, secrets.randbits(64) if nonce is None else nonce)

    def next(self) -> "EpochId":
        return EpochId(self.counter + 1, self.job_nonce)

    @property
    def tag(self) -> str:
        return f"e{self.counter:016x}-{self.job_nonce:016x}"


@dataclass(frozen=True)
class SegmentName:
    base: str
    epoch: EpochId
    rank: int
    offset: int

    def __str__(self):
        return f"{self.base}.{self.epoch.tag}.r{self.rank}.o{self.offset}{SEGMENT_SUFFIX}"


@dataclass(frozen=True)
class ChunkListName:
    base: str
    epoch: EpochId
    rank: int

    def __str__(self):
        return f"{self.base}.{self.epoch.tag}.r{self.rank}{CHUNKS_SUFFIX}"

    @property
    def temp(self) -> str:
        return str(self) + TEMP_SUFFIX


def target_basename(target_name: str) -> str:
    base = os.path.basename(target_name.rstrip("/"))
    if not base or base in (".", ".."):
        raise ValueError(f"cannot derive a file name from {target_name!r}")
    return base


def _epoch(m: re.Match) -> EpochId:
    return EpochId(int(m["counter"], 16), int(m["nonce"], 16))


def parse_segment_name(name: str) -> SegmentName:
    m = _SEGMENT_RE.match(os.path.basename(name))
    if m is None:
        raise ValueError(f"not a segment name: {name!r}")
    return SegmentName(m["base"], _epoch(m), int(m["rank"]), int(m["offset"]))


def parse_chunk_list_name(name: str) -> ChunkListName:
    name = os.path.basename(name)
    if name.endswith(TEMP_SUFFIX):
        name = name[: -len(TEMP_SUFFIX)]
    m = _CHUNKS_RE.match(name)
    if m is None:
        raise ValueError(f"not a chunk list name: {name!r}")
    return ChunkListName(m["base"], _epoch(m), int(m["rank"]))
