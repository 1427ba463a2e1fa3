"""Command-line entry points: ``syncer``, ``recover`` and ``harness``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import faults
from .backend import open_backend
from .errors import StagedIOError

log = logging.getLogger("stagedio")

EXIT_CRASH = 137


def _setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _bw(value):
    v = float(value)
    if v <= 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return v


# -- syncer -------------------------------------------------------------------

def syncer_parser():
    p = argparse.ArgumentParser(prog="syncer", description="Per-node writeback daemon.")
    p.add_argument("--watch", required=True, type=Path, help="ready/ directory to drain")
    p.add_argument("--backend", required=True, help="posix:PATH or s3:ENDPOINT/BUCKET/KEY")
    p.add_argument("--rank", type=int, default=0, help="node id")
    p.add_argument("--nodes", type=int, default=1)
    p.add_argument("--world-size", type=int, default=None,
                   help="ranks in the job (object-store rendezvous; defaults to --nodes)")
    p.add_argument("--exchange", type=Path, default=None,
                   help="directory shared by all nodes' syncers (object store only)")
    p.add_argument("--retain", action="store_true", help="keep segments after writeback")
    p.add_argument("--bw-limit", type=_bw, default=None, metavar="BYTES/S")
    p.add_argument("--poll-interval", type=float, default=0.1)
    p.add_argument("--no-notify", action="store_true", help="rescan only, no inotify")
    p.add_argument("--fault", default=None, metavar="POINT[:AFTER]", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def syncer_main(argv=None):
    from .syncer import Syncer, SyncerConfig

    args = syncer_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if args.fault:
        point, _, after = args.fault.partition(":")
        faults.arm(point, int(after or 0))
    config = SyncerConfig(retain=args.retain, poll_interval=args.poll_interval,
                          use_notify=not args.no_notify, node=args.rank, nodes=args.nodes,
                          world_size=args.world_size, exchange_dir=args.exchange)
    try:
        syncer = Syncer(args.watch, open_backend(args.backend, args.bw_limit), config)
        syncer.run()
    except faults.SimulatedCrash as exc:
        # behave like a SIGKILL: no cleanup, no flushing of Python buffers
        sys.stderr.write(f"{exc}\n")
        sys.stderr.flush()
        os._exit(EXIT_CRASH)
    except (StagedIOError, FileNotFoundError) as exc:
        print(f"syncer: {exc}", file=sys.stderr)
        return 1
    if syncer.errors:
        for name, why in syncer.errors:
            print(f"syncer: quarantined {name}: {why}", file=sys.stderr)
    return 0


# -- recover ------------------------------------------------------------------

def recover_parser():
    p = argparse.ArgumentParser(
        prog="recover", description="Rebuild shared files from surviving node caches.")
    p.add_argument("--cache", required=True, nargs="+", type=Path, help="node cache dirs")
    p.add_argument("--backend", required=True)
    p.add_argument("--world-size", required=True, type=int)
    p.add_argument("--dry-run", action="store_true",
                   help="print the inventory and consistency points, write nothing")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def recover_main(argv=None):
    from . import recovery

    args = recover_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        inv = recovery.scan(args.cache, promote=not args.dry_run)
        print(inv.report(args.world_size))
        if args.dry_run:
            return 0
        result = recovery.recover(inv, open_backend(args.backend), args.world_size)
    except StagedIOError as exc:
        print(f"recover: {exc}", file=sys.stderr)
        return 1
    for base, counter in sorted(result.consistency_points.items()):
        print(f"recovered {base} to epoch {counter}")
    print(f"replayed {len(result.replayed)} list(s)")
    return 0


# -- harness ------------------------------------------------------------------

def harness_parser():
    p = argparse.ArgumentParser(prog="harness", description="Workloads, benchmarks, drills.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run one job descriptor (TOML)")
    run.add_argument("descriptor", type=Path)
    run.add_argument("--workdir", type=Path, default=None)
    run.add_argument("--out", type=Path, default=None, help="CSV file (default stdout)")
    run.add_argument("--no-verify", action="store_true")

    sw = sub.add_parser("sweep", help="output-frequency sweep, staged vs direct")
    sw.add_argument("descriptor", type=Path)
    sw.add_argument("--outputs", default="1,2,4", help="comma-separated output counts")
    sw.add_argument("--total-cycles", type=int, default=8)
    sw.add_argument("--workdir", type=Path, default=None)
    sw.add_argument("--out", type=Path, default=None)
    sw.add_argument("--figure", type=Path, default=None)

    bench = sub.add_parser("bench-segments", help="segment overhead vs direct writes")
    bench.add_argument("--sizes", default=None, help="comma-separated KiB sizes")
    bench.add_argument("--storage", type=Path, default=Path("."))
    bench.add_argument("--reps", type=int, default=None)
    bench.add_argument("--variant", choices=("open-write", "append-seek"), default="open-write")
    bench.add_argument("--out", type=Path, default=None)
    bench.add_argument("--figure", type=Path, default=None)

    drill = sub.add_parser("crash-drill", help="run a descriptor with a [crash] plan")
    drill.add_argument("plan", type=Path)
    drill.add_argument("--workdir", type=Path, default=None)
    drill.add_argument("--out", type=Path, default=None)
    return p


def _emit(rows, out):
    from .harness.report import to_csv

    text = to_csv(rows, out)
    if out is None:
        sys.stdout.write(text)


def _workdir(path):
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
        return path
    return Path(tempfile.mkdtemp(prefix="stagedio-"))


def harness_main(argv=None):
    from .harness import bench, crash, report, runner
    from .harness.descriptor import JobDescriptor

    args = harness_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        if args.cmd == "run":
            desc = JobDescriptor.load(args.descriptor)
            m = runner.run_job(desc, _workdir(args.workdir), verify=not args.no_verify)
            _emit([m.row()], args.out)
        elif args.cmd == "sweep":
            desc = JobDescriptor.load(args.descriptor)
            outputs = [int(x) for x in args.outputs.split(",")]
            rows = runner.frequency_sweep(desc, outputs, args.total_cycles,
                                          _workdir(args.workdir))
            _emit(rows, args.out)
            if args.figure:
                report.plot_frequency_sweep(rows, args.figure)
        elif args.cmd == "bench-segments":
            sizes = ([float(x) for x in args.sizes.split(",")] if args.sizes else None)
            if args.variant == "open-write":
                rows = bench.microbench_segments(sizes or bench.DEFAULT_SIZES_KIB,
                                                 args.storage, args.reps)
                plot = report.plot_segment_bench
            else:
                kw = {"sizes_kib": sizes} if sizes else {}
                rows = bench.microbench_append_seek(storage_path=args.storage,
                                                    reps=args.reps or 3, **kw)
                plot = report.plot_append_seek
            _emit(rows, args.out)
            if args.figure:
                plot(rows, args.figure)
        elif args.cmd == "crash-drill":
            desc = JobDescriptor.load(args.plan)
            if desc.crash is None:
                print("crash-drill: descriptor has no [crash] table", file=sys.stderr)
                return 2
            r = crash.crash_drill(desc, _workdir(args.workdir))
            c = r.comparison
            _emit([dict(point=r.point, ok=r.ok, fired=r.fired, failed_at=r.failed_at,
                        replay_upto=r.replay_upto, divergence_offset=c.offset,
                        message=c.message)], args.out)
            return 0 if r.ok else 1
    except (StagedIOError, ValueError, OSError, runner.ConsistencyViolation) as exc:
        print(f"harness: {exc}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"syncer": syncer_main, "recover": recover_main, "harness": harness_main}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in COMMANDS:
        print(f"usage: python -m stagedio {{{','.join(COMMANDS)}}} ...", file=sys.stderr)
        return 2
    return COMMANDS[argv[0]](argv[1:])
