"""S3-compatible object target.

Objects are immutable, so each consistency point rebuilds the whole object from
the segments of every epoch seen so far. Large hole-free objects go up as a
multipart upload whose parts (all but the last at least 5 MiB) are each owned by
one node; anything smaller, or with holes, is gathered by the leader and sent as
a single PUT with holes zero-filled.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlsplit

from ..collective import atomic_write_json, wait_for
from ..errors import ArgumentError, BackendError, PlanError, ProtocolError
from ..naming import RESHUFFLE_SUFFIX

log = logging.getLogger(__name__)

MiB = 1024 * 1024
MIN_PART = 5 * MiB
MULTIPART_THRESHOLD = 16 * MiB


@dataclass(frozen=True)
class Span:
    """Bytes ``[0, length)`` of cache file ``path`` belong at ``offset`` of the object.

    ``order`` is the epoch counter; higher orders win where spans overlap.
    """

    offset: int
    length: int
    path: str
    order: int = 0
    node: int = 0

    @property
    def end(self):
        return self.offset + self.length


@dataclass(frozen=True)
class Part:
    part_number: int
    offset: int
    length: int
    node: int = 0

    @property
    def end(self):
        return self.offset + self.length


@dataclass
class PartPlan:
    parts: list
    upload_id: str | None = None
    etags: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.parts[-1].end if self.parts else 0

    def ranges_of(self, node):
        return [(p.offset, p.end) for p in self.parts if p.node == node]

    def validate(self, min_part=MIN_PART):
        prev_end, prev_num = 0, 0
        for i, p in enumerate(self.parts):
            if p.offset != prev_end:
                raise PlanError(f"part {p.part_number} starts at {p.offset}, expected {prev_end}")
            if p.part_number <= prev_num:
                raise PlanError("part numbers must increase strictly from 1")
            if p.length < min_part and i != len(self.parts) - 1:
                raise PlanError(f"non-final part {p.part_number} is {p.length} bytes < {min_part}")
            if p.length <= 0:
                raise PlanError(f"empty part {p.part_number}")
            prev_end, prev_num = p.end, p.part_number
        return self


def coverage(spans):
    """Merged ``[start, end)`` intervals covered by ``spans``."""
    merged = []
    for s in sorted(spans, key=lambda s: s.offset):
        if merged and s.offset <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], s.end)
        else:
            merged.append([s.offset, s.end])
    return [tuple(m) for m in merged]


def holes(spans):
    """Uncovered gaps inside ``[0, max end)``."""
    gaps, pos = [], 0
    for lo, hi in coverage(spans):
        if lo > pos:
            gaps.append((pos, lo))
        pos = hi
    return gaps


@dataclass
class Reshuffle:
    plan: PartPlan
    fallback: bool
    reason: str = ""


def reshuffle_small_segments(node_segments, min_part=MIN_PART):
    """Regroup scattered segments into per-node contiguous ranges of the object.

    ``node_segments`` maps node id -> spans held by that node. The covered span
    ``[0, size)`` is cut into at most one contiguous range per node, each at least
    ``min_part`` bytes except the last; range ``i`` goes to the ``i``-th node.
    Objects that cannot be cut that way (holes, or smaller than one part) are
    flagged for the single-PUT fallback.
    """
    spans = [s for group in node_segments.values() for s in group]
    nodes = sorted(node_segments)
    size = max((s.end for s in spans), default=0)
    if holes(spans):
        return Reshuffle(PartPlan([]), True, "object has holes")
    if size < min_part:
        return Reshuffle(PartPlan([]), True, f"object of {size} bytes is below one part")
    part_len = max(min_part, math.ceil(size / len(nodes)))
    parts = []
    for i, lo in enumerate(range(0, size, part_len)):
        parts.append(Part(i + 1, lo, min(part_len, size - lo), nodes[i % len(nodes)]))
    # a short tail that is not last cannot happen: only the final cut is short
    return Reshuffle(PartPlan(parts).validate(min_part), False)


def materialize(spans, lo, hi):
    """Bytes ``[lo, hi)`` of the object image; later orders win, gaps are zeros."""
    buf = bytearray(hi - lo)
    for s in sorted(spans, key=lambda s: s.order):
        a, b = max(lo, s.offset), min(hi, s.end)
        if a >= b:
            continue
        with open(s.path, "rb") as fh:
            fh.seek(a - s.offset)
            chunk = fh.read(b - a)
        if len(chunk) != b - a:
            raise BackendError(f"segment {s.path} is shorter than its record")
        buf[a - lo:b - lo] = chunk
    return bytes(buf)


def parse_s3_locator(locator):
    """``s3:http(s)://host:port/bucket/key`` -> (endpoint, bucket, key)."""
    if locator.startswith("s3:"):
        locator = locator[3:]
    parts = urlsplit(locator)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise ArgumentError(f"bad s3 locator {locator!r}")
    bucket, _, key = parts.path.lstrip("/").partition("/")
    if not bucket:
        raise ArgumentError(f"s3 locator {locator!r} names no bucket")
    return f"{parts.scheme}://{parts.netloc}", bucket, key


class S3Backend:
    """Thin wrapper over the S3 multipart subset.

    ``key`` ending in "/" (or empty) is a prefix and each target is stored under
    prefix + basename; otherwise every target maps to that exact key.
    """

    kind = "s3"

    def __init__(self, locator, client=None, min_part=MIN_PART,
                 multipart_threshold=MULTIPART_THRESHOLD, retries=5, backoff=0.1):
        self.endpoint, self.bucket, self.key = parse_s3_locator(locator)
        self.min_part = min_part
        self.multipart_threshold = multipart_threshold
        self.retries = retries
        self.backoff = backoff
        self._client = client
        self.requests = []

    @property
    def client(self):
        if self._client is None:
            import boto3

            self._client = boto3.client(
                "s3",
                endpoint_url=self.endpoint,
                region_name=os.environ.get("AWS_DEFAULT_REGION", "us-east-1"),
            )
        return self._client

    def key_for(self, target_name):
        if not self.key or self.key.endswith("/"):
            return self.key + os.path.basename(target_name)
        return self.key

    def _call(self, op, **kwargs):
        from botocore.exceptions import BotoCoreError, ClientError

        for attempt in range(self.retries):
            try:
                self.requests.append(op)
                return getattr(self.client, op)(Bucket=self.bucket, **kwargs)
            except ClientError as exc:
                code = exc.response.get("Error", {}).get("Code", "")
                if code.startswith("5") or code in ("SlowDown", "InternalError", "RequestTimeout"):
                    err = exc
                else:
                    raise BackendError(f"{op}: {exc}") from exc
            except BotoCoreError as exc:
                err = exc
            time.sleep(self.backoff * 2**attempt)
        raise BackendError(f"{op} failed after {self.retries} attempts: {err}") from err

    def list_uploads(self, key):
        resp = self._call("list_multipart_uploads", Prefix=key)
        return [u["UploadId"] for u in resp.get("Uploads", []) if u["Key"] == key]

    def initiate_multipart(self, key, is_leader=True):
        """Start a multipart session, aborting any earlier ones for the same key."""
        if not is_leader:
            raise ProtocolError("only the leader syncer may initiate a multipart upload")
        for stale in self.list_uploads(key):
            self.abort_multipart(key, stale)
        return self._call("create_multipart_upload", Key=key)["UploadId"]

    def upload_part(self, key, upload_id, part_number, data, final=False):
        if part_number < 1:
            raise ArgumentError("part numbers are 1-based")
        if len(data) < self.min_part and not final:
            raise PlanError(f"non-final part {part_number} of {len(data)} bytes < {self.min_part}")
        resp = self._call("upload_part", Key=key, UploadId=upload_id,
                          PartNumber=part_number, Body=data)
        return resp["ETag"]

    def complete_multipart(self, key, upload_id, etags, plan=None, is_leader=True):
        if not is_leader:
            raise ProtocolError("only the leader syncer may complete a multipart upload")
        expected = [p.part_number for p in plan.parts] if plan else sorted(etags)
        missing = [n for n in expected if n not in etags]
        if missing:
            raise PlanError(f"cannot complete {upload_id}: no etag for parts {missing}")
        parts = [{"PartNumber": n, "ETag": etags[n]} for n in sorted(expected)]
        self._call("complete_multipart_upload", Key=key, UploadId=upload_id,
                   MultipartUpload={"Parts": parts})

    def abort_multipart(self, key, upload_id):
        self._call("abort_multipart_upload", Key=key, UploadId=upload_id)

    def fallback_single_put(self, key, data, is_leader=True):
        if not is_leader:
            raise ProtocolError("only the leader syncer may issue the gathered PUT")
        self._call("put_object", Key=key, Body=bytes(data))

    def get(self, target_name):
        """Download an object (tests and comparisons only)."""
        return self._call("get_object", Key=self.key_for(target_name))["Body"].read()

    def upload_image(self, target_name, node_spans):
        """Upload a complete object image from one process, playing every node."""
        key = self.key_for(target_name)
        spans = [s for g in node_spans.values() for s in g]
        size = max((s.end for s in spans), default=0)
        shuffle = reshuffle_small_segments(node_spans or {0: []}, self.min_part)
        if shuffle.fallback or size < self.multipart_threshold:
            self.fallback_single_put(key, materialize(spans, 0, size))
            return None
        plan = shuffle.plan
        plan.upload_id = self.initiate_multipart(key)
        for p in plan.parts:
            plan.etags[p.part_number] = self.upload_part(
                key, plan.upload_id, p.part_number, materialize(spans, p.offset, p.end),
                final=p is plan.parts[-1])
        self.complete_multipart(key, plan.upload_id, plan.etags, plan)
        return plan


class S3NodeWriteback:
    """One node's share of the collective object upload.

    Syncers meet in ``exchange_dir`` (any directory every node can reach):
    each chunk list becomes a deposit naming its segments; once all
    ``world_size`` deposits for an epoch are in, every node computes the same
    part plan, the leader initiates, each node uploads its own parts and the
    leader completes. Deposits of earlier epochs stay so later epochs can
    rebuild the whole object.
    """

    def __init__(self, backend, node, exchange_dir, world_size, cache_dir, timeout=120.0):
        self.backend = backend
        self.node = node
        self.cache_dir = Path(cache_dir)
        self.exchange = Path(exchange_dir)
        self.world_size = world_size
        self.timeout = timeout

    def _edir(self, base, epoch):
        d = self.exchange / base / epoch.tag
        d.mkdir(parents=True, exist_ok=True)
        return d

    def deposit(self, base, epoch, rank, records, cache_dir):
        path = self._edir(base, epoch) / f"deposit.r{rank}.json"
        if path.exists():
            return
        atomic_write_json(path, {
            "node": self.node, "rank": rank, "counter": epoch.counter,
            "spans": [[r.offset, r.length, str(Path(cache_dir) / r.segment_name)] for r in records],
        })

    def _spans(self, base, epoch):
        by_node = {}
        for edir in (self.exchange / base).iterdir():
            if not edir.name.endswith(f"-{epoch.job_nonce:016x}"):
                continue
            for dep in edir.glob("deposit.r*.json"):
                d = json.loads(dep.read_text())
                if d["counter"] > epoch.counter:
                    continue
                by_node.setdefault(d["node"], []).extend(
                    Span(o, n, p, d["counter"], d["node"]) for o, n, p in d["spans"])
        return by_node

    def commit(self, base, epoch, pump=None):
        """Block until the object for ``(base, epoch)`` is durable in S3."""
        edir = self._edir(base, epoch)
        done = edir / "done.json"

        def ready():
            if pump is not None:
                pump()
            return len(list(edir.glob("deposit.r*.json"))) >= self.world_size

        wait_for(ready, self.timeout, what=f"{self.world_size} deposits for {base} {epoch.tag}")
        if done.exists():
            return
        participants = sorted({json.loads(p.read_text())["node"] for p in edir.glob("deposit.r*.json")})
        leader = participants[0] == self.node
        key = self.backend.key_for(base)
        node_spans = self._spans(base, epoch)
        spans = [s for g in node_spans.values() for s in g]
        size = max((s.end for s in spans), default=0)
        # nodes with nothing in this object still own parts if they took part
        shuffle = reshuffle_small_segments({n: node_spans.get(n, []) for n in participants},
                                           self.backend.min_part)
        if shuffle.fallback or size < self.backend.multipart_threshold:
            if leader:
                self.backend.fallback_single_put(key, materialize(spans, 0, size))
                atomic_write_json(done, {"mode": "put", "size": size})
            wait_for(done.exists, self.timeout, what=f"PUT of {key}")
            return
        plan = shuffle.plan
        upload = edir / "upload.json"
        if leader:
            atomic_write_json(upload, {"upload_id": self.backend.initiate_multipart(key)})
        wait_for(upload.exists, self.timeout, what=f"upload id for {key}")
        plan.upload_id = json.loads(upload.read_text())["upload_id"]
        for p in plan.parts:
            if p.node != self.node:
                continue
            staged = self.cache_dir / f"{base}.{epoch.tag}.n{self.node}.o{p.offset}{RESHUFFLE_SUFFIX}"
            staged.write_bytes(materialize(spans, p.offset, p.end))
            etag = self.backend.upload_part(key, plan.upload_id, p.part_number,
                                            staged.read_bytes(), final=p is plan.parts[-1])
            staged.unlink()
            atomic_write_json(edir / f"etag.p{p.part_number}.json", {"etag": etag})
        if leader:
            etag_files = [edir / f"etag.p{p.part_number}.json" for p in plan.parts]
            wait_for(lambda: all(f.exists() for f in etag_files), self.timeout,
                     what=f"etags for {key}")
            etags = {p.part_number: json.loads(f.read_text())["etag"]
                     for p, f in zip(plan.parts, etag_files)}
            self.backend.complete_multipart(key, plan.upload_id, etags, plan)
            atomic_write_json(done, {"mode": "multipart", "size": size,
                                     "parts": [[p.part_number, p.offset, p.length, p.node]
                                               for p in plan.parts]})
        wait_for(done.exists, self.timeout, what=f"completion of {key}")
