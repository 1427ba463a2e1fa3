"""Chunk-list file format and the durable publish protocol.

A chunk list is UTF-8 text with LF line endings::

    <segment_name>\\t<offset>\\t<length>\\n      (one per record)
    #count=<n> crc32=<8 lowercase hex digits>\\n

The CRC covers the record lines exactly as stored, newlines included.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path

from . import faults
from .errors import IntegrityError, NamingCollisionError


@dataclass(frozen=True)
class ChunkRecord:
    segment_name: str
    offset: int
    length: int

    def __post_init__(self):
        if self.length <= 0 or self.offset < 0:
            raise ValueError(f"invalid chunk record {self}")
        if "\t" in self.segment_name or "\n" in self.segment_name:
            raise ValueError(f"segment name may not contain TAB/LF: {self.segment_name!r}")

    @property
    def end(self) -> int:
        return self.offset + self.length


def encode(records) -> bytes:
    body = "".join(f"{r.segment_name}\t{r.offset}\t{r.length}\n" for r in records).encode()
    return body + f"#count={len(records)} crc32={zlib.crc32(body):08x}\n".encode()


def decode(data: bytes) -> list[ChunkRecord]:
    """Parse and verify a chunk list; raises IntegrityError on any defect."""
    if not data.endswith(b"\n"):
        raise IntegrityError("chunk list truncated (no trailing newline)")
    cut = data.rfind(b"\n", 0, len(data) - 1) + 1
    body, footer = data[:cut], data[cut:-1]
    try:
        fields = dict(kv.split("=", 1) for kv in footer.decode().lstrip("#").split(" "))
        count, crc = int(fields["count"]), int(fields["crc32"], 16)
    except (ValueError, KeyError, UnicodeDecodeError):
        raise IntegrityError(f"bad chunk list footer {footer!r}") from None
    if not footer.startswith(b"#") or zlib.crc32(body) != crc:
        raise IntegrityError("chunk list crc mismatch")
    records = []
    for line in body.decode().splitlines():
        try:
            name, off, length = line.split("\t")
            records.append(ChunkRecord(name, int(off), int(length)))
        except ValueError:
            raise IntegrityError(f"malformed chunk record {line!r}") from None
    if len(records) != count:
        raise IntegrityError(f"footer count {count} != {len(records)} records")
    return records


def read(path) -> list[ChunkRecord]:
    return decode(Path(path).read_bytes())


def is_valid(path) -> bool:
    try:
        read(path)
    except (IntegrityError, OSError):
        return False
    return True


def fsync_dir(path) -> None:
    fd = os.open(path, os.O_RDONLY | os.O_DIRECTORY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def write_durable(path, records) -> None:
    """Write the list to ``path`` and fsync it; the caller renames it later."""
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
    try:
        view = memoryview(encode(records))
        while view:
            view = view[os.write(fd, view):]
        os.fsync(fd)
    finally:
        os.close(fd)


def publish(temp_path, final_path) -> None:
    """Atomically move a flushed list into the watch directory.

    The rename is the writeback trigger; an existing destination means an
    epoch/rank pair was reused and is fatal.
    """
    temp_path, final_path = Path(temp_path), Path(final_path)
    faults.hit("chunklist.before_rename", path=temp_path)
    if final_path.exists():
        raise NamingCollisionError(f"{final_path} already published")
    os.rename(temp_path, final_path)
    fsync_dir(final_path.parent)
