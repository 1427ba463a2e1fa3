"""Rendezvous primitives for simulated ranks and syncers.

``LocalCollective`` serves the common case where one driver holds every rank, so a
collective call already is a barrier. ``FileCollective`` lets separate threads or
OS processes meet through nothing but a shared directory.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

from .errors import CollectiveError


class LocalCollective:
    def barrier(self):
        pass

    def bcast(self, value, root=0):
        return value


def atomic_write_json(path, obj):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{time.monotonic_ns()}.tmp")
    tmp.write_text(json.dumps(obj))
    os.replace(tmp, path)


def wait_for(predicate, timeout, interval=0.005, what="condition"):
    deadline = time.monotonic() + timeout
    while True:
        value = predicate()
        if value:
            return value
        if time.monotonic() > deadline:
            raise CollectiveError(f"timed out after {timeout}s waiting for {what}")
        time.sleep(interval)


class FileCollective:
    """Directory-backed barrier/broadcast among ``size`` members.

    Each call opens a numbered round; members call collectives in the same order,
    so round numbers line up without further coordination.
    """

    def __init__(self, path, size, member, timeout=60.0):
        self.path = Path(path)
        self.size = size
        self.member = member
        self.timeout = timeout
        self._round = 0
        self.path.mkdir(parents=True, exist_ok=True)

    def bcast(self, value, root=0):
        rdir = self.path / f"round-{self._round:08d}"
        self._round += 1
        rdir.mkdir(exist_ok=True)
        atomic_write_json(rdir / f"m{self.member}.json", value if self.member == root else None)
        wait_for(
            lambda: len(list(rdir.glob("m*.json"))) >= self.size,
            self.timeout,
            what=f"{self.size} members in {rdir.name}",
        )
        return json.loads((rdir / f"m{root}.json").read_text())

    def barrier(self):
        self.bcast(None)
