"""Reference images built by replaying a trace straight into memory.

Offsets are computed here from the view fields directly rather than through
``FileView.block_offset`` so that the oracle and the facade disagree if either
gets the arithmetic wrong.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .payload import payload


@dataclass
class OracleImage:
    data: bytearray = field(default_factory=bytearray)
    writes: list = field(default_factory=list)  # (lo, hi, verb index, generation)

    def write(self, offset, blob, verb_index, generation):
        end = offset + len(blob)
        if end > len(self.data):
            self.data.extend(bytes(end - len(self.data)))
        self.data[offset:end] = blob
        self.writes.append((offset, end, verb_index, generation))

    def written_by(self, offset):
        for lo, hi, idx, gen in reversed(self.writes):
            if lo <= offset < hi:
                return idx, gen
        return None


def replay(trace, upto=None):
    """Images keyed by target basename for ``trace.verbs[:upto]``."""
    images = {}
    current = None
    view = None
    blocks_done = {}
    ws = trace.world_size
    for idx, verb in enumerate(trace.verbs[:upto]):
        if verb.op == "open":
            current = images.setdefault(os.path.basename(verb.target), OracleImage())
            view = None
        elif verb.op == "set_view":
            view = verb.view
            blocks_done = {r: 0 for r in range(ws)}
        elif verb.op == "write_all":
            B = view.block_length
            stride = view.stride if view.stride is not None else ws * B
            for r in range(ws):
                for _ in range(verb.blocks):
                    off = view.displacement + blocks_done[r] * stride + r * B
                    current.write(off, payload(trace.seed, verb.generation, off, B),
                                  idx, verb.generation)
                    blocks_done[r] += 1
        elif verb.op == "close":
            current = None
    return images


def last_consistency_point(trace, failed_at):
    """Verb count to replay when the job died while executing verb ``failed_at``.

    ``None`` for ``failed_at`` means the job finished.
    """
    if failed_at is None:
        return len(trace.verbs)
    points = [i for i in trace.commit_points() if i < failed_at]
    return points[-1] + 1 if points else 0


@dataclass
class Comparison:
    ok: bool
    target: str | None = None
    offset: int | None = None
    verb_index: int | None = None
    generation: int | None = None
    message: str = ""

    def __bool__(self):
        return self.ok


def compare_oracle(images, read_remote):
    """Compare every oracle image with ``read_remote(basename)``.

    ``read_remote`` returns the remote bytes or ``None`` if the target does not
    exist. Holes read as zeros on both POSIX and (zero-filled) object targets, so
    the comparison is plain byte equality over the whole image.
    """
    for base, img in sorted(images.items()):
        remote = read_remote(base)
        if remote is None:
            remote = b""
            if img.data:
                return Comparison(False, base, 0, message=f"{base}: missing on remote")
        expected = bytes(img.data)
        if remote == expected:
            continue
        n = min(len(remote), len(expected))
        mismatch = np.flatnonzero(np.frombuffer(remote, np.uint8, n)
                                  != np.frombuffer(expected, np.uint8, n))
        diff = int(mismatch[0]) if mismatch.size else n
        who = img.written_by(diff) or (None, None)
        return Comparison(
            False, base, diff, who[0], who[1],
            f"{base}: first divergence at offset {diff} (remote {len(remote)} B, "
            f"oracle {len(expected)} B, written by verb {who[0]} generation {who[1]})")
    return Comparison(True)
