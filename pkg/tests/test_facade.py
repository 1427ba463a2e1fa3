import threading
import time

import pytest

from stagedio import chunklist, engine, facade
from stagedio.collective import FileCollective
from stagedio.engine import Mode
from stagedio.errors import ArgumentError, CollectiveError, ProtocolError, UnstagedModeError
from stagedio.facade import FileView, JobGroup
from stagedio.naming import SENTINEL_NAME, parse_chunk_list_name, parse_segment_name


@pytest.fixture
def group(tmp_path):
    return JobGroup(4, [tmp_path / "n0", tmp_path / "n1"], nonce=7, backlog_limit=None)


def lists(group):
    return sorted(p for d in group.cache_dirs for p in (d / "ready").glob("*.chunks"))


def image(group):
    out = bytearray()
    for p in lists(group):
        for r in chunklist.read(p):
            cache = p.parent.parent
            data = (cache / r.segment_name).read_bytes()[:r.length]
            out.extend(bytes(max(0, r.end - len(out))))
            out[r.offset:r.end] = data
    return bytes(out)


def test_open_gives_one_session_per_rank(group):
    f = facade.file_open(group, "out/field.vtk")
    assert sorted(f.sessions) == [0, 1, 2, 3]
    assert all(e.glob_off == 0 for e in f.sessions.values())
    assert f.sessions[1].cache_dir == group.cache_dirs[1].resolve()
    facade.file_close(f)


def test_read_modes_refused(group):
    with pytest.raises(UnstagedModeError):
        facade.file_open(group, "x", Mode.RDWR | Mode.CREATE)


def test_prefix_pass_through(tmp_path):
    g = JobGroup(1, [tmp_path / "n0"], stage_prefix="/stage/")
    assert facade.file_open(g, "/remote/out.dat") is None
    f = facade.file_open(g, "/stage/out.dat")
    assert f is not None
    facade.file_close(f)


def test_view_positions_each_rank(group):
    f = facade.file_open(group, "f")
    facade.file_set_view(f, FileView(1 << 20))
    assert f.sessions[2].glob_off == 2 << 20
    facade.file_set_view(f, FileView(1024, 128))
    assert f.sessions[0].glob_off == 128
    facade.file_close(f)


def test_mismatched_displacement(group):
    f = facade.file_open(group, "f")
    views = {r: FileView(8, r) for r in range(4)}
    with pytest.raises(CollectiveError):
        facade.file_set_view(f, views)
    facade.file_close(f)


def test_contiguous_decomposition(tmp_path):
    g = JobGroup(2, [tmp_path / "n0"], nonce=1, backlog_limit=None)
    f = facade.file_open(g, "f")
    facade.file_set_view(f, FileView(1024))
    facade.file_write_all(f, {0: b"a" * 1024, 1: b"b" * 1024})
    facade.file_close(f)
    assert image(g) == b"a" * 1024 + b"b" * 1024


def test_consecutive_write_all_appends_for_single_rank(tmp_path):
    g = JobGroup(1, [tmp_path / "n0"], nonce=1, backlog_limit=None)
    f = facade.file_open(g, "f")
    facade.file_set_view(f, FileView(1024, 128))
    facade.file_write_all(f, {0: b"a" * 1024})
    facade.file_write_all(f, {0: b"b" * 1024})
    facade.file_close(f)
    assert len(list((tmp_path / "n0").glob("*.seg"))) == 1


def test_strided_view_segments_per_block(group):
    # stride leaves a gap after every rank's block, so no two blocks of a rank touch
    B, ws = 512, group.world_size
    f = facade.file_open(group, "f")
    facade.file_set_view(f, FileView(B, 0, ws * B + 100))
    facade.file_write_all(f, {r: bytes([r + 1]) * (3 * B) for r in range(ws)})
    facade.file_close(f)
    per_rank = {}
    for d in group.cache_dirs:
        for p in d.glob("*.seg"):
            per_rank.setdefault(parse_segment_name(p.name).rank, []).append(p)
    assert {r: len(v) for r, v in per_rank.items()} == {r: 3 for r in range(ws)}


def test_write_all_length_checked(group):
    f = facade.file_open(group, "f")
    facade.file_set_view(f, FileView(100))
    with pytest.raises(ArgumentError):
        facade.file_write_all(f, {0: b"x" * 150})
    facade.file_close(f)


def test_write_all_needs_view(group):
    f = facade.file_open(group, "f")
    with pytest.raises(ProtocolError):
        facade.file_write_all(f, {0: b""})
    facade.file_close(f)


def test_sync_publishes_world_size_lists(group):
    f = facade.file_open(group, "f")
    facade.file_sync(f)
    assert len(lists(group)) == 4
    assert all(chunklist.read(p) == [] for p in lists(group))
    assert f.epoch.counter == 1
    facade.file_close(f)
    counters = sorted(parse_chunk_list_name(p.name).epoch.counter for p in lists(group))
    assert counters == [0] * 4 + [1] * 4


def test_sync_then_rewrite_later_epoch_wins(tmp_path):
    g = JobGroup(2, [tmp_path / "n0"], nonce=1, backlog_limit=None)
    f = facade.file_open(g, "f")
    view = FileView(16)
    facade.file_set_view(f, view)
    facade.file_write_all(f, {0: b"0" * 16, 1: b"1" * 16})
    facade.file_sync(f)
    facade.file_set_view(f, view)
    facade.file_write_all(f, {0: b"A" * 16, 1: b"B" * 16})
    facade.file_close(f)
    newest = {}
    for p in lists(g):
        c = parse_chunk_list_name(p.name).epoch.counter
        for r in chunklist.read(p):
            if c >= newest.get(r.offset, (-1,))[0]:
                newest[r.offset] = (c, (p.parent.parent / r.segment_name).read_bytes())
    assert newest == {0: (1, b"A" * 16), 16: (1, b"B" * 16)}


def test_reopen_same_target_uses_fresh_epoch(group):
    f = facade.file_open(group, "f")
    facade.file_close(f)
    g = facade.file_open(group, "f")
    assert g.epoch.counter == f.epoch.counter + 1
    facade.file_close(g)


def test_close_failure_reports_rank(group):
    f = facade.file_open(group, "f")
    engine.abandon(f.sessions[3])
    with pytest.raises(CollectiveError) as info:
        facade.file_close(f)
    assert info.value.rank == 3


def test_close_throttles_on_backlog(tmp_path):
    g = JobGroup(1, [tmp_path / "n0"], nonce=1, backlog_limit=2, backlog_poll=0.001)
    ready = tmp_path / "n0" / "ready"
    (ready / "old.e0000000000000000-0000000000000009.r0.chunks").write_bytes(b"")
    f = facade.file_open(g, "f")

    def drain():
        time.sleep(0.2)
        for p in ready.glob("*.chunks"):
            p.unlink()

    t = threading.Thread(target=drain)
    t.start()
    waited = facade.file_close(f)
    t.join()
    assert waited >= 0.15


def test_finalize_is_idempotent(group):
    facade.finalize(group)
    facade.finalize(group)
    for d in group.cache_dirs:
        assert (d / "ready" / SENTINEL_NAME).exists()


def test_ranks_in_separate_workers_rendezvous(tmp_path):
    caches = [tmp_path / "n0", tmp_path / "n1"]
    results, errors = {}, []

    def worker(rank):
        try:
            g = JobGroup(2, caches, local_ranks=[rank],
                         collective=FileCollective(tmp_path / "coll", 2, rank, timeout=10),
                         backlog_limit=None)
            f = facade.file_open(g, "shared.dat")
            facade.file_set_view(f, FileView(8))
            facade.file_write_all(f, {rank: bytes([65 + rank]) * 8})
            facade.file_sync(f)
            facade.file_close(f)
            results[rank] = (g.nonce, f.epoch)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(r,)) for r in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors
    assert results[0] == results[1]
    assert len(list((tmp_path / "n0" / "ready").glob("*.chunks"))) == 2
