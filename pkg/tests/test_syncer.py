import os
import time

import pytest

from stagedio import engine, facade
from stagedio.backend.posix import PosixBackend
from stagedio.chunklist import ChunkRecord
from stagedio.errors import BackendError, IntegrityError, PlanError, WritebackFailed
from stagedio.naming import EpochId
from stagedio.syncer import (
    EventSource,
    Syncer,
    SyncerConfig,
    load_chunk_list,
    plan_writeback,
    retrying,
    start_in_thread,
)

NONCE = 0x55
LIST = f"f.e{0:016x}-{NONCE:016x}.r0.chunks"


def stage(cache, epoch, writes, rank=0, target="f"):
    e = engine.open_session(target, rank, cache, epoch)
    for off, data in writes:
        engine.pwrite(e, data, offset=off)
    return engine.close_session(e)


def run_to_end(syncer, timeout=10):
    facade.write_sentinel(syncer.cache_dir)
    t = start_in_thread(syncer)
    t.join(timeout)
    assert not t.is_alive()
    if t.exc:
        raise t.exc
    return syncer


@pytest.fixture
def remote(tmp_path):
    return PosixBackend(tmp_path / "remote")


def test_plan_merges_adjacent_records():
    recs = [ChunkRecord("c.seg", 300, 50), ChunkRecord("a.seg", 0, 100),
            ChunkRecord("b.seg", 100, 100)]
    plan = plan_writeback(recs, LIST)
    assert plan.target_name == "f"
    assert [(r.target_offset, r.total_length, len(r.spans)) for r in plan.runs] == \
        [(0, 200, 2), (300, 50, 1)]
    assert plan.total_bytes == 250


def test_plan_rejects_overlap():
    with pytest.raises(PlanError):
        plan_writeback([ChunkRecord("a.seg", 0, 100), ChunkRecord("b.seg", 50, 10)], LIST)


def test_writes_back_and_consumes(cache, remote):
    stage(cache, EpochId(0, NONCE), [(10, b"hello"), (100, b"world")])
    s = run_to_end(Syncer(cache / "ready", remote, SyncerConfig(poll_interval=0.01)))
    assert remote.read("f") == bytes(10) + b"hello" + bytes(85) + b"world"
    assert not list(cache.glob("*.seg"))
    assert len(list((cache / "synced").iterdir())) == 1
    assert not (cache / "ready" / "__staged_io_exit__").exists()
    assert len(s.processed) == 1


def test_retain_keeps_segments(cache, remote):
    stage(cache, EpochId(0, NONCE), [(0, b"x")])
    run_to_end(Syncer(cache / "ready", remote, SyncerConfig(retain=True, poll_interval=0.01)))
    assert len(list(cache.glob("*.seg"))) == 1


@pytest.mark.parametrize("notify", [True, False])
def test_fifo_later_epoch_lands_last(cache, remote, notify):
    for c in range(5):
        stage(cache, EpochId(c, NONCE), [(0, bytes([65 + c]) * 64)])
    s = run_to_end(Syncer(cache / "ready", remote,
                          SyncerConfig(poll_interval=0.01, use_notify=notify)))
    assert remote.read("f") == b"E" * 64
    assert [int(n.split(".e")[1][:16], 16) for n in s.processed] == [0, 1, 2, 3, 4]


def test_live_arrivals_in_order(cache, remote):
    s = Syncer(cache / "ready", remote, SyncerConfig(poll_interval=0.01))
    t = start_in_thread(s)
    for c in range(6):
        stage(cache, EpochId(c, NONCE), [(c % 2, bytes([48 + c]) * 8)])
        time.sleep(0.005 * (c % 3))
    facade.write_sentinel(cache)
    t.join(10)
    assert t.exc is None
    assert remote.read("f") == b"4" + b"5" * 8
    assert len(s.processed) == 6


def test_event_source_orders_by_ctime(tmp_path):
    ready = tmp_path / "ready"
    ready.mkdir()
    names = [f"z{i}.e{i:016x}-{1:016x}.r0.chunks" for i in range(3)][::-1]
    for n in names:
        (tmp_path / n).write_bytes(b"")
        os.rename(tmp_path / n, ready / n)
        time.sleep(0.01)
    src = EventSource(ready, 0.01, use_notify=False)
    got = [src.get(1).chunk_list_path.name for _ in names]
    src.close()
    assert got == names


def test_corrupt_list_is_quarantined(cache, remote):
    stage(cache, EpochId(0, NONCE), [(0, b"good")])
    bad = cache / "ready" / f"g.e{1:016x}-{NONCE:016x}.r0.chunks"
    bad.write_bytes(b"garbage\n")
    s = run_to_end(Syncer(cache / "ready", remote, SyncerConfig(poll_interval=0.01)))
    assert remote.read("f") == b"good"
    assert (cache / "quarantine" / bad.name).exists()
    assert [n for n, _ in s.errors] == [bad.name]


def test_missing_segment_is_integrity_error(cache):
    listed = stage(cache, EpochId(0, NONCE), [(0, b"abc")])
    for p in cache.glob("*.seg"):
        p.unlink()
    with pytest.raises(IntegrityError):
        load_chunk_list(listed)


class Flaky(PosixBackend):
    def __init__(self, root, failures):
        super().__init__(root)
        self.failures = failures

    def open_target(self, name):
        if self.failures:
            self.failures -= 1
            raise BackendError("transient")
        return super().open_target(name)


def test_transient_failures_are_retried(cache, tmp_path):
    stage(cache, EpochId(0, NONCE), [(0, b"abc")])
    backend = Flaky(tmp_path / "r", 3)
    run_to_end(Syncer(cache / "ready", backend,
                      SyncerConfig(poll_interval=0.01, backoff=0.001)))
    assert backend.read("f") == b"abc"


def test_exhausted_retries_stop_the_syncer(cache, tmp_path):
    listed = stage(cache, EpochId(0, NONCE), [(0, b"abc")])
    with pytest.raises(WritebackFailed):
        run_to_end(Syncer(cache / "ready", Flaky(tmp_path / "r", 99),
                          SyncerConfig(poll_interval=0.01, backoff=0.001)))
    assert listed.exists() and len(list(cache.glob("*.seg"))) == 1


def test_retry_backoff_schedule(monkeypatch):
    sleeps = []
    monkeypatch.setattr(time, "sleep", sleeps.append)

    def fail():
        raise BackendError("no")

    with pytest.raises(WritebackFailed):
        retrying(fail, 5, 0.1)
    assert sleeps == pytest.approx([0.1, 0.2, 0.4, 0.8])


def test_missing_watch_dir(tmp_path, remote):
    with pytest.raises(FileNotFoundError):
        Syncer(tmp_path / "nope", remote)
