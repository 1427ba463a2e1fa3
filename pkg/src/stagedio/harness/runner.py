"""Execute a job descriptor with staging on (facade + background syncers) or off
(every write goes straight to the backend)."""

from __future__ import annotations

import logging
import signal
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .. import chunklist, faults, facade, recovery
from ..backend import open_backend
from ..errors import BackendError, StagedIOError
from ..naming import CHUNKS_SUFFIX, READY_DIR, SYNCED_DIR
from ..syncer import Syncer, SyncerConfig, start_in_thread
from .descriptor import Metrics
from .oracle import compare_oracle, replay
from .trace import generate_trace

log = logging.getLogger(__name__)


class ConsistencyViolation(AssertionError):
    pass


class Job:
    """One descriptor bound to a working directory.

    Layout: ``node<i>/cache`` per simulated node, ``remote/`` for the default
    POSIX target and ``exchange/`` for object-store syncer rendezvous.
    """

    def __init__(self, desc, workdir, seed=None):
        self.desc = desc
        self.workdir = Path(workdir)
        self.trace = generate_trace(desc, seed)
        self.cache_dirs = [self.workdir / f"node{i}" / "cache" for i in range(desc.nodes)]
        for d in self.cache_dirs:
            (d / READY_DIR).mkdir(parents=True, exist_ok=True)
        self.remote_dir = self.workdir / "remote"
        self.exchange_dir = self.workdir / "exchange"
        self.locator = desc.backend or f"posix:{self.remote_dir}"
        self.syncers = {}
        self.metrics = Metrics()
        self.synth_s = 0.0  # harness-side payload generation, excluded from timings
        self.group = None
        self._file = None
        self._view = None
        self._blocks = {}

    # -- backends and syncers -------------------------------------------------

    def backend(self, throttled=True):
        return open_backend(self.locator, self.desc.bw_limit if throttled else None)

    def syncer_config(self, node):
        d = self.desc
        return SyncerConfig(poll_interval=d.poll_interval, use_notify=d.use_notify, node=node,
                            nodes=d.nodes, world_size=d.world_size,
                            exchange_dir=self.exchange_dir)

    def start_syncers(self, nodes=None, fault=None):
        for node in range(self.desc.nodes) if nodes is None else nodes:
            watch = self.cache_dirs[node] / READY_DIR
            if self.desc.syncer_mode == "process":
                cmd = [sys.executable, "-m", "stagedio", "syncer", "--watch", str(watch),
                       "--backend", self.locator, "--rank", str(node),
                       "--nodes", str(self.desc.nodes), "--world-size", str(self.desc.world_size),
                       "--exchange", str(self.exchange_dir),
                       "--poll-interval", str(self.desc.poll_interval)]
                if self.desc.bw_limit:
                    cmd += ["--bw-limit", str(int(self.desc.bw_limit))]
                if fault and fault[0] == node:
                    cmd += ["--fault", fault[1]]
                self.syncers[node] = subprocess.Popen(cmd, stderr=subprocess.PIPE)
            else:
                s = Syncer(watch, self.backend(), self.syncer_config(node))
                self.syncers[node] = (s, start_in_thread(s))

    def kill_syncer(self, node):
        worker = self.syncers.get(node)
        if isinstance(worker, subprocess.Popen):
            worker.send_signal(signal.SIGKILL)
            worker.wait()

    def wait_syncers(self, timeout=120.0):
        """Join every syncer; re-raise real failures, tolerate simulated crashes."""
        deadline = time.monotonic() + timeout
        for node, worker in self.syncers.items():
            left = max(0.0, deadline - time.monotonic())
            if isinstance(worker, subprocess.Popen):
                try:
                    worker.wait(left)
                except subprocess.TimeoutExpired:
                    worker.kill()
                    raise ConsistencyViolation(f"syncer on node {node} did not exit") from None
                finally:
                    if worker.stderr:
                        worker.stderr.close()
                continue
            syncer, thread = worker
            thread.join(left)
            if thread.is_alive():
                raise ConsistencyViolation(f"syncer on node {node} did not exit")
            if thread.exc is not None and not isinstance(thread.exc, faults.SimulatedCrash):
                raise thread.exc
            if syncer.errors:
                raise ConsistencyViolation(f"syncer on node {node}: {syncer.errors}")

    # -- verb execution -------------------------------------------------------

    def make_group(self):
        d = self.desc
        self.group = facade.JobGroup(
            d.world_size, self.cache_dirs, backlog_limit=d.backlog_limit,
            cb_buffer_size=d.cb_buffer_size, nonce=d.seed & 0xFFFFFFFFFFFFFFFF or None)
        return self.group

    def execute(self, idx, verb):
        """Run one verb staged; returns seconds spent inside output verbs."""
        if verb.op == "compute":
            time.sleep(verb.seconds)
            self.metrics.compute_s += verb.seconds
            return 0.0
        if verb.op == "write_all":
            # payload synthesis stands in for the application's buffers: untimed
            s0 = time.perf_counter()
            data = {r: self.trace.data_for(r, verb, self._view, self._blocks[r])
                    for r in range(self.desc.world_size)}
            self.synth_s += time.perf_counter() - s0
        t0 = time.perf_counter()
        if verb.op == "open":
            self._file = facade.file_open(self.group, verb.target)
        elif verb.op == "set_view":
            facade.file_set_view(self._file, verb.view)
            self._view = verb.view
            self._blocks = {r: 0 for r in range(self.desc.world_size)}
        elif verb.op == "write_all":
            facade.file_write_all(self._file, data)
            for r in data:
                self._blocks[r] += verb.blocks
        elif verb.op == "sync":
            facade.file_sync(self._file)
        elif verb.op == "close":
            self.metrics.throttled_s += facade.file_close(self._file)
            self._file = None
            self.metrics.outputs += 1
        return time.perf_counter() - t0

    def execute_direct(self, idx, verb, backends, pool):
        """Baseline: write_all blocks go to the backend synchronously, per node in parallel."""
        if verb.op == "compute":
            time.sleep(verb.seconds)
            self.metrics.compute_s += verb.seconds
            return 0.0
        if verb.op == "write_all":
            s0 = time.perf_counter()
            by_node = {}
            B = self._view.block_length
            for r in range(self.desc.world_size):
                offs = self.trace.block_offsets(r, verb, self._view, self._blocks[r])
                blob = self.trace.data_for(r, verb, self._view, self._blocks[r])
                by_node.setdefault(r % self.desc.nodes, []).extend(
                    (off, blob[i * B:(i + 1) * B]) for i, off in enumerate(offs))
                self._blocks[r] += verb.blocks
            self.synth_s += time.perf_counter() - s0
        t0 = time.perf_counter()
        if verb.op == "open":
            self._target = verb.target
        elif verb.op == "set_view":
            self._view = verb.view
            self._blocks = {r: 0 for r in range(self.desc.world_size)}
        elif verb.op == "write_all":

            def push(node):
                with backends[node].open_target(self._target) as w:
                    for off, data in by_node[node]:
                        w.pwrite(off, data)
                    w.flush()

            list(pool.map(push, by_node))
        elif verb.op == "close":
            self.metrics.outputs += 1
        return time.perf_counter() - t0

    def run_verbs(self, start=0, stop=None):
        """Run staged verbs ``[start, stop)``; returns the index of a simulated
        crash, or None if all ran."""
        if self.group is None:
            self.make_group()
        verbs = self.trace.verbs
        for idx in range(start, len(verbs) if stop is None else stop):
            try:
                self.metrics.blocked_output_s += self.execute(idx, verbs[idx])
            except faults.SimulatedCrash:
                return idx
        return None

    def finish(self, timeout=120.0):
        t0 = time.perf_counter()
        for d in self.cache_dirs:
            facade.write_sentinel(d)
        if self.group is not None:
            self.group.finalized = True
        self.wait_syncers(timeout)
        self.metrics.drain_s = time.perf_counter() - t0

    # -- inspection -----------------------------------------------------------

    def read_remote(self, base):
        backend = self.backend(throttled=False)
        if backend.kind == "s3":
            try:
                return backend.get(base)
            except BackendError:
                return None
        path = backend.path_of(base)
        return path.read_bytes() if path.exists() else None

    def segment_count(self):
        names = set()
        for d in self.cache_dirs:
            for sub in (READY_DIR, SYNCED_DIR):
                for p in (d / sub).glob(f"*{CHUNKS_SUFFIX}") if (d / sub).is_dir() else ():
                    try:
                        names.update(r.segment_name for r in chunklist.read(p))
                    except StagedIOError:
                        pass
        return len(names)

    def recover(self, backend=None):
        inv = recovery.scan(self.cache_dirs)
        return inv, recovery.recover(inv, backend or self.backend(throttled=False),
                                     self.desc.world_size)

    def verify(self, upto=None):
        return compare_oracle(replay(self.trace, upto), self.read_remote)


def run_job(desc, workdir, seed=None, verify=True):
    """Run ``desc`` end to end and return its metrics.

    With staging on, end-to-end time runs until every syncer has drained, i.e.
    until the output is durable remotely, the same finish line as the baseline.
    """
    job = Job(desc, workdir, seed)
    t0 = time.perf_counter()
    if desc.staging:
        job.start_syncers()
        try:
            failed = job.run_verbs()
            if failed is not None:
                raise ConsistencyViolation(f"unexpected crash at verb {failed}")
        finally:
            job.finish()
    else:
        backends = [job.backend() for _ in range(desc.nodes)]
        with ThreadPoolExecutor(desc.nodes) as pool:
            for idx, verb in enumerate(job.trace.verbs):
                job.metrics.blocked_output_s += job.execute_direct(idx, verb, backends, pool)
        job.metrics.remote_bytes = sum(b.bytes_written for b in backends)
    job.metrics.end_to_end_s = time.perf_counter() - t0 - job.synth_s
    if desc.staging:
        job.metrics.segment_count = job.segment_count()
        job.metrics.remote_bytes = sum(
            getattr(w[0].backend, "bytes_written", 0)
            for w in job.syncers.values() if isinstance(w, tuple))
    if verify:
        result = job.verify()
        if not result:
            raise ConsistencyViolation(result.message)
    job.metrics.extra["workdir"] = str(job.workdir)
    return job.metrics


def frequency_sweep(desc, outputs, total_cycles, workdir):
    """Baseline vs staged end-to-end time for several output counts.

    Total compute is fixed at ``total_cycles * compute_ms``; ``outputs[i]``
    outputs are spread evenly over it.
    """
    from dataclasses import replace

    rows = []
    for n in outputs:
        if total_cycles % n:
            raise ValueError(f"{total_cycles} cycles do not split into {n} outputs")
        d = replace(desc, total_outputs=n, cycles_per_output=total_cycles // n)
        base = run_job(replace(d, staging=False), Path(workdir) / f"base-{n}")
        staged = run_job(replace(d, staging=True), Path(workdir) / f"staged-{n}")
        rows.append(dict(
            outputs=n,
            baseline_s=base.end_to_end_s,
            staged_s=staged.end_to_end_s,
            improvement=1 - staged.end_to_end_s / base.end_to_end_s,
            baseline_blocked_frac=base.blocked_output_s / base.end_to_end_s,
            baseline_blocked_s=base.blocked_output_s,
            staged_blocked_s=staged.blocked_output_s,
        ))
    return rows
