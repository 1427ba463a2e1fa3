"""Ranged-write POSIX target, optionally throttled to emulate a slow PFS/NFS link."""

from __future__ import annotations

import os
from pathlib import Path

from ..errors import BackendError
from .throttle import TokenBucket

PIECE = 64 * 1024


class PosixWriter:
    def __init__(self, backend, path):
        self.backend = backend
        self.path = path
        try:
            self.fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
        except OSError as exc:
            raise BackendError(f"cannot open {path}: {exc}") from exc

    def pwrite(self, offset, data):
        view = memoryview(data).cast("B")
        try:
            while view:
                piece = view[:PIECE]
                if self.backend.bucket is not None:
                    self.backend.bucket.acquire(len(piece))
                n = os.pwrite(self.fd, piece, offset)
                self.backend.bytes_written += n
                view, offset = view[n:], offset + n
        except OSError as exc:
            raise BackendError(f"write to {self.path} failed: {exc}") from exc

    def flush(self):
        try:
            os.fsync(self.fd)
        except OSError as exc:
            raise BackendError(f"fsync of {self.path} failed: {exc}") from exc

    def close(self):
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PosixBackend:
    """Shared files live directly under ``root``, named by target basename.

    Several processes may write disjoint ranges of one file concurrently;
    ``pwrite`` on separate descriptors never interleaves bytes.
    """

    kind = "posix"

    def __init__(self, root, bw_limit=None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.bw_limit = bw_limit
        self.bucket = TokenBucket(bw_limit) if bw_limit else None
        self.bytes_written = 0

    def path_of(self, target_name):
        return self.root / os.path.basename(target_name)

    def open_target(self, target_name):
        return PosixWriter(self, self.path_of(target_name))

    def write_range(self, target_name, offset, data):
        """Durably write ``data`` at ``offset``; returns the byte count acked."""
        if offset < 0:
            raise ValueError(f"negative offset {offset}")
        with self.open_target(target_name) as w:
            w.pwrite(offset, data)
            w.flush()
        return len(data)

    def read(self, target_name):
        return self.path_of(target_name).read_bytes()

    def exists(self, target_name):
        return self.path_of(target_name).exists()
