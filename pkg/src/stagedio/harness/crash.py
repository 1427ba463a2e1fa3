"""Crash drills: run a job, kill something at a chosen point, recover, compare."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .. import engine, faults
from .oracle import compare_oracle, last_consistency_point, replay
from .runner import Job

log = logging.getLogger(__name__)


@dataclass
class DrillResult:
    point: str
    comparison: object
    failed_at: int | None
    replay_upto: int
    recovered: object
    inventory: str
    fired: bool = True

    @property
    def ok(self):
        return bool(self.comparison)


def _close_index(trace, output):
    for i, v in enumerate(trace.verbs):
        if v.op == "close" and v.output == output:
            return i
    raise ValueError(f"trace has no output {output}")


def inject_crash(job, plan):
    """Arm the fault for ``plan`` and run the job into it.

    Returns ``(failed_at, upto)``: the verb being executed when the job died
    (None if it finished or stopped cleanly) and how many verbs the oracle must
    replay to reach the last consistency point.
    """
    trace = job.trace
    cache = str(job.cache_dirs[plan.node])
    on_node = (lambda cache_dir=None, **_: cache_dir == cache)
    point = plan.point
    if point == "pre_consume":
        stop = _close_index(trace, plan.output) + 1
        return job.run_verbs(stop=stop), stop
    if point == "post_close":
        stop = _close_index(trace, plan.output) + 1
        if not plan.kill_process:
            faults.arm("syncer.before_consume", after=plan.after, predicate=on_node)
        job.start_syncers()
        failed = job.run_verbs(stop=stop)
        if plan.kill_process:
            job.kill_syncer(plan.node)
        return failed, stop
    if point == "mid_writeback":
        if plan.kill_process:
            job.start_syncers(fault=(plan.node, f"writeback.mid_run:{plan.after}"))
        else:
            faults.arm("writeback.mid_run", after=plan.after, predicate=on_node)
            job.start_syncers()
        return job.run_verbs(), len(trace.verbs)
    if point == "flush_rename":
        faults.arm("chunklist.before_rename", after=plan.after)
        job.start_syncers()
        failed = job.run_verbs()
        # every rank had flushed before the first rename, so the interrupted
        # sync/close is itself a consistency point
        return failed, len(trace.verbs) if failed is None else failed + 1
    if point == "before_close":
        close = _close_index(trace, plan.output)
        job.start_syncers()
        failed = job.run_verbs(stop=close)
        if failed is not None:
            return failed, last_consistency_point(trace, failed)
        f = job._file
        for rank, entry in f.sessions.items():
            if rank == plan.rank % job.desc.world_size:
                engine.abandon(entry)
            else:
                engine.stage_close(entry)
        return close, last_consistency_point(trace, close)
    raise ValueError(point)


def crash_drill(desc, workdir, seed=None):
    """Run one drill described by ``desc.crash``; the caches are recovered into
    the job's remote target and compared with the truncated oracle."""
    plan = desc.crash
    if plan is None:
        raise ValueError("descriptor has no crash plan")
    desc = replace(desc, backlog_limit=None,
                   syncer_mode="process" if plan.kill_process else desc.syncer_mode)
    job = Job(desc, workdir, seed)
    point = {"post_close": "syncer.before_consume", "mid_writeback": "writeback.mid_run",
             "flush_rename": "chunklist.before_rename"}.get(plan.point)
    try:
        failed, upto = inject_crash(job, plan)
    finally:
        # armed points stay live while the surviving syncers drain
        try:
            job.finish()
        finally:
            fired = point is None or faults.fired(point)
            faults.disarm()
    inv, recovered = job.recover()
    comparison = compare_oracle(replay(job.trace, upto), job.read_remote)
    if not comparison:
        log.error("drill %s failed: %s", plan, comparison.message)
    return DrillResult(plan.point, comparison, failed, upto, recovered,
                       inv.report(desc.world_size), fired or plan.kill_process)
