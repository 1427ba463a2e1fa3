"""Collective verb traces following the usual N-1 output pattern:
open -> set_view -> write_all x k -> [sync] -> close, once per output phase."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..facade import FileView
from .payload import payload


@dataclass(frozen=True)
class Verb:
    op: str  # compute | open | set_view | write_all | sync | close
    output: int = 0
    target: str = ""
    view: FileView | None = None
    blocks: int = 0
    generation: int = 0
    seconds: float = 0.0


@dataclass
class Trace:
    world_size: int
    seed: int
    verbs: list = field(default_factory=list)

    def data_for(self, rank, verb, view, first_block=0):
        """Payload of ``rank`` for a write_all whose first block is ``first_block``."""
        return b"".join(
            payload(self.seed, verb.generation, off, view.block_length)
            for off in self.block_offsets(rank, verb, view, first_block))

    def block_offsets(self, rank, verb, view, first_block=0):
        return [view.block_offset(rank, first_block + i, self.world_size)
                for i in range(verb.blocks)]

    def commit_points(self):
        """Indices of verbs after which a consistency point holds."""
        return [i for i, v in enumerate(self.verbs) if v.op in ("sync", "close")]


def _view(desc, displacement=None):
    disp = desc.displacement if displacement is None else displacement
    if desc.view == "strided":
        return FileView(desc.block_length, disp, desc.stride)
    return FileView.contiguous(desc.block_length, disp)


def seek_append_trace(seed=0):
    """Rank 0 writes 1024 B at 128, appends 1024 B, then writes 1024 B at 4096."""
    t = Trace(1, seed)
    t.verbs += [
        Verb("open", 0, "out/file.vtk"),
        Verb("set_view", 0, view=FileView(1024, 128)),
        Verb("write_all", 0, blocks=2, generation=1),
        Verb("set_view", 0, view=FileView(1024, 4096)),
        Verb("write_all", 0, blocks=1, generation=2),
        Verb("close", 0),
    ]
    return t


def generate_trace(desc, seed=None):
    seed = desc.seed if seed is None else seed
    if desc.pattern == "seek_append":
        return seek_append_trace(seed)
    t = Trace(desc.world_size, seed)
    generation = 0
    for o in range(desc.total_outputs):
        t.verbs.append(Verb("compute", o, seconds=desc.compute_s))
        view = _view(desc)
        t.verbs += [Verb("open", o, desc.target_of(o)), Verb("set_view", o, view=view)]
        for w in range(desc.writes_per_output):
            generation += 1
            t.verbs.append(Verb("write_all", o, blocks=desc.blocks_per_write,
                                generation=generation))
            if desc.sync_every and (w + 1) % desc.sync_every == 0:
                t.verbs.append(Verb("sync", o))
                if desc.rewrite_after_sync:
                    t.verbs.append(Verb("set_view", o, view=view))
        t.verbs.append(Verb("close", o))
    return t
