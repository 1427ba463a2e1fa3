"""Job descriptors: what a simulated run writes, how often, and where it may crash."""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CRASH_POINTS = ("post_close", "mid_writeback", "flush_rename", "pre_consume", "before_close")


@dataclass
class CrashPlan:
    """Where a drill kills something.

    ``post_close``: syncer on ``node`` dies before consuming its next list once
    output ``output`` has closed; the job stops there too.
    ``mid_writeback``: syncer on ``node`` dies during its ``after``-th remote
    write; the job runs to completion.
    ``flush_rename``: the job dies at its ``after``-th chunk-list rename.
    ``pre_consume``: no syncer ever consumes anything; the job stops after
    output ``output``.
    ``before_close``: rank ``rank`` dies before closing output ``output``.
    """

    point: str
    output: int = 0
    node: int = 0
    rank: int = 0
    after: int = 0
    kill_process: bool = False

    def __post_init__(self):
        if self.point not in CRASH_POINTS:
            raise ValueError(f"unknown crash point {self.point!r}; pick one of {CRASH_POINTS}")


@dataclass
class JobDescriptor:
    world_size: int = 1
    nodes: int = 1
    block_length: int = 1024
    blocks_per_write: int = 1
    writes_per_output: int = 1
    view: str = "contiguous"  # or "strided"
    stride: int | None = None
    displacement: int = 0
    compute_ms: float = 0.0
    cycles_per_output: int = 1
    total_outputs: int = 1
    backend: str | None = None  # default: posix under the job directory
    bw_limit: float | None = None
    staging: bool = True
    sync_every: int = 0  # sync after every n-th write_all (0 = never)
    rewrite_after_sync: bool = False
    same_target: bool = False
    target: str = "out/field{output:04d}.dat"
    cb_buffer_size: int | None = None
    backlog_limit: int | None = 4
    pattern: str = "ior"  # or "seek_append"
    seed: int = 0
    syncer_mode: str = "thread"  # or "process"
    use_notify: bool = True
    poll_interval: float = 0.02
    crash: CrashPlan | None = None

    def __post_init__(self):
        if isinstance(self.crash, dict):
            self.crash = CrashPlan(**self.crash)
        for name in ("world_size", "nodes", "block_length", "blocks_per_write",
                     "writes_per_output", "cycles_per_output"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.total_outputs < 0:
            raise ValueError("total_outputs must be >= 0")
        if self.nodes > self.world_size:
            raise ValueError("every node needs at least one rank")
        if self.view not in ("contiguous", "strided"):
            raise ValueError(f"unknown view {self.view!r}")
        if self.view == "strided" and (self.stride or 0) < self.world_size * self.block_length:
            raise ValueError("a strided view needs stride >= world_size * block_length")
        if self.pattern not in ("ior", "seek_append"):
            raise ValueError(f"unknown pattern {self.pattern!r}")

    @property
    def compute_s(self):
        return self.compute_ms * self.cycles_per_output / 1000.0

    @property
    def bytes_per_output(self):
        return self.world_size * self.block_length * self.blocks_per_write * self.writes_per_output

    def target_of(self, output):
        return self.target.format(output=0 if self.same_target else output)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown descriptor keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("job", data))


def random_descriptor(rng: random.Random, **overrides):
    """A small randomized job for property and acceptance corpora."""
    world = rng.randint(1, 8)
    nodes = rng.randint(1, min(4, world))
    block = rng.choice([64, 100, 512, 1024, 4096])
    strided = rng.random() < 0.5
    d = dict(
        world_size=world,
        nodes=nodes,
        block_length=block,
        blocks_per_write=rng.randint(1, 3),
        writes_per_output=rng.randint(1, 3),
        view="strided" if strided else "contiguous",
        stride=world * block + rng.choice([1, block, 3 * block + 7]) if strided else None,
        displacement=rng.choice([0, 0, 128, rng.randint(1, 5000)]),
        total_outputs=rng.randint(1, 8),
        sync_every=rng.choice([0, 0, 1, 2]),
        rewrite_after_sync=rng.random() < 0.3,
        same_target=rng.random() < 0.3,
        cb_buffer_size=rng.choice([None, None, block // 2 or 1, 3 * block // 4 or 1]),
        seed=rng.getrandbits(32),
    )
    d.update(overrides)
    return JobDescriptor(**d)


@dataclass
class Metrics:
    end_to_end_s: float = 0.0
    compute_s: float = 0.0
    blocked_output_s: float = 0.0
    throttled_s: float = 0.0
    drain_s: float = 0.0
    remote_bytes: int = 0
    segment_count: int = 0
    outputs: int = 0
    extra: dict = field(default_factory=dict)

    FIELDS = ("end_to_end_s", "compute_s", "blocked_output_s", "throttled_s", "drain_s",
              "remote_bytes", "segment_count", "outputs")

    def row(self):
        return {k: getattr(self, k) for k in self.FIELDS}
