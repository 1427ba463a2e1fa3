import os

import pytest

from stagedio import engine, faults, recovery
from stagedio.backend.posix import PosixBackend
from stagedio.backend.s3 import S3Backend
from stagedio.errors import RecoveryError
from stagedio.naming import EpochId
from stagedio.syncer import Syncer, SyncerConfig

NONCE = 0x77


def stage(cache, counter, rank, writes, target="f"):
    e = engine.open_session(target, rank, cache, EpochId(counter, NONCE))
    for off, data in writes:
        engine.pwrite(e, data, offset=off)
    return engine.close_session(e)


@pytest.fixture
def caches(tmp_path):
    out = []
    for i in range(2):
        d = tmp_path / f"n{i}"
        (d / "ready").mkdir(parents=True)
        out.append(d)
    return out


def test_replays_complete_epochs_in_order(caches, tmp_path):
    for c in range(3):
        stage(caches[0], c, 0, [(0, bytes([65 + c]) * 4)])
        stage(caches[1], c, 1, [(4, bytes([97 + c]) * 4)])
    backend = PosixBackend(tmp_path / "remote")
    inv = recovery.scan(caches)
    res = recovery.recover(inv, backend, 2)
    assert backend.read("f") == b"CCCCcccc"
    assert res.consistency_points == {"f": 2}
    assert len(res.replayed) == 6


def test_stops_before_first_incomplete_epoch(caches, tmp_path):
    stage(caches[0], 0, 0, [(0, b"old0")])
    stage(caches[1], 0, 1, [(4, b"old1")])
    stage(caches[0], 1, 0, [(0, b"new0")])  # rank 1 never closed epoch 1
    stage(caches[0], 2, 0, [(0, b"gap0")])
    stage(caches[1], 2, 1, [(4, b"gap1")])
    backend = PosixBackend(tmp_path / "remote")
    inv = recovery.scan(caches)
    report = inv.report(2)
    assert "INCOMPLETE, missing ranks [1]" in report and "after gap" in report
    res = recovery.recover(inv, backend, 2)
    assert backend.read("f") == b"old0old1"
    assert res.skipped_epochs == {"f": [1, 2]}


def test_promotes_flushed_but_unrenamed_list(caches, tmp_path):
    faults.arm("chunklist.before_rename")
    with pytest.raises(faults.SimulatedCrash):
        stage(caches[0], 0, 0, [(0, b"data")])
    faults.disarm()
    inv = recovery.scan([caches[0]])
    assert len(inv.promoted) == 1
    assert not list(caches[0].glob("*.tmp"))
    recovery.recover(inv, PosixBackend(tmp_path / "r"), 1)
    assert (tmp_path / "r" / "f").read_bytes() == b"data"


def test_dry_scan_changes_nothing(caches):
    faults.arm("chunklist.before_rename")
    with pytest.raises(faults.SimulatedCrash):
        stage(caches[0], 0, 0, [(0, b"data")])
    faults.disarm()
    before = sorted(os.listdir(caches[0]))
    inv = recovery.scan([caches[0]], promote=False)
    assert len(inv.promoted) == 1 and sorted(os.listdir(caches[0])) == before


def test_truncated_temp_list_is_an_anomaly(caches):
    (caches[0] / f"f.e{0:016x}-{NONCE:016x}.r0.chunks.tmp").write_bytes(b"x.seg\t0\t")
    inv = recovery.scan([caches[0]])
    assert inv.anomalies and not inv.targets


def test_skips_what_the_syncer_already_applied(caches, tmp_path):
    backend = PosixBackend(tmp_path / "remote")
    stage(caches[0], 0, 0, [(0, b"aa")])
    s = Syncer(caches[0] / "ready", backend, SyncerConfig(retain=True))
    (caches[0] / "ready" / "__staged_io_exit__").touch()
    s.run()
    stage(caches[0], 1, 0, [(2, b"bb")])
    res = recovery.recover(recovery.scan([caches[0]]), backend, 1)
    assert len(res.replayed) == 1
    assert backend.read("f") == b"aabb"


def test_is_idempotent(caches, tmp_path):
    stage(caches[0], 0, 0, [(0, b"1234")])
    backend = PosixBackend(tmp_path / "remote")
    for _ in range(2):
        recovery.recover(recovery.scan([caches[0]]), backend, 1)
        assert backend.read("f") == b"1234"


def test_missing_segment_is_reported(caches, tmp_path):
    stage(caches[0], 0, 0, [(0, b"1234")])
    for p in caches[0].glob("*.seg"):
        p.unlink()
    with pytest.raises(RecoveryError, match="missing"):
        recovery.recover(recovery.scan([caches[0]]), PosixBackend(tmp_path / "r"), 1)


def test_object_store_rebuilds_whole_image(caches, s3_bucket):
    stage(caches[0], 0, 0, [(0, b"AAAA")])
    stage(caches[1], 0, 1, [(4, b"BBBB")])
    stage(caches[0], 1, 0, [(0, b"CC")])
    stage(caches[1], 1, 1, [])
    backend = S3Backend(f"s3:{s3_bucket}/")
    recovery.recover(recovery.scan(caches), backend, 2)
    assert backend.get("f") == b"CCAABBBB"
