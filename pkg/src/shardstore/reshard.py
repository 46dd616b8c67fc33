"""Reshard a stored dataset: new global record order, new shard size.

The operation runs in three phases.  Indexing streams every source
shard's headers once and notes, per record, its payload size and the
byte span it occupies.  Planning orders the index (seeded random
permutation or lexicographic key sort) and packs records greedily into
output shards, never splitting a record.  Execution builds output
shards concurrently, fetching each record's span with a ranged read and
re-serializing it, and uploads them; a manifest object in the
destination bucket records completed shards so an interrupted job can
resume without redoing them.
"""

from __future__ import annotations

import io
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from tempfile import SpooledTemporaryFile
from typing import BinaryIO, Callable, ContextManager, Dict, Iterator, List, Optional, Sequence, Tuple

from .cluster.client import StoreClient
from .cluster.cmap import ObjectRef, replica_set
from .errors import DuplicateKeyError, ObjectNotFoundError, ReshardError
from .hashing import hash64
from .records import Record, split_entry_path
from .rng import permuted
from .tario import TRAILER, ShardStats, iter_entry_spans, read_shard, write_shard

log = logging.getLogger(__name__)

SPOOL_LIMIT = 64 << 20
MANIFEST_SCHEMA = 1

ShardOpener = Callable[[str], ContextManager[BinaryIO]]


def parse_order(order: str) -> Tuple[str, Optional[int]]:
    """Parse an order spec: ``key`` or ``random:SEED``."""
    if order == "key":
        return "key", None
    kind, _, seed = order.partition(":")
    if kind == "random" and seed:
        try:
            return "random", int(seed, 0)
        except ValueError:
            pass
    raise ValueError(f"order must be 'key' or 'random:SEED', got {order!r}")


@dataclass(frozen=True)
class ReshardSpec:
    """Parameters of one reshard job."""

    src_bucket: str
    src_prefix: str
    dst_bucket: str
    order: str
    target_shard_bytes: int
    min_shard_bytes: int = 1
    template: str = "shard-%06d.tar"

    def __post_init__(self) -> None:
        parse_order(self.order)
        if not 0 < self.min_shard_bytes <= self.target_shard_bytes:
            raise ValueError(
                "need 0 < min_shard_bytes <= target_shard_bytes, got "
                f"{self.min_shard_bytes} / {self.target_shard_bytes}"
            )
        try:
            distinct = self.template % 0 != self.template % 1
        except (TypeError, ValueError):
            distinct = False
        if not distinct:
            raise ValueError(
                f"template {self.template!r} needs one integer placeholder"
            )

    def to_dict(self) -> Dict[str, object]:
        return {
            "src_bucket": self.src_bucket,
            "src_prefix": self.src_prefix,
            "dst_bucket": self.dst_bucket,
            "order": self.order,
            "target_shard_bytes": self.target_shard_bytes,
            "min_shard_bytes": self.min_shard_bytes,
            "template": self.template,
        }

    @property
    def job_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return format(hash64(blob), "016x")

    @property
    def manifest_name(self) -> str:
        return f".reshard-{self.job_id}.json"


@dataclass(frozen=True)
class RecordIndexEntry:
    """One record's identity and location inside a source shard.

    ``span_start``/``span_end`` bound the contiguous run of tar entries
    (pax preludes included) so the record can be fetched with one ranged
    read.  ``source_key`` is the key as stored; ``key`` differs only when
    permissive indexing had to suffix a duplicate.
    """

    key: str
    shard_name: str
    payload_bytes: int
    extensions: Tuple[str, ...]
    span_start: int
    span_end: int
    source_key: str

    @property
    def span_bytes(self) -> int:
        return self.span_end - self.span_start


@dataclass(frozen=True)
class OutputShard:
    name: str
    entries: Tuple[RecordIndexEntry, ...]

    @property
    def payload_bytes(self) -> int:
        return sum(e.payload_bytes for e in self.entries)


@dataclass(frozen=True)
class ReshardPlan:
    spec: ReshardSpec
    outputs: Tuple[OutputShard, ...]

    @property
    def record_count(self) -> int:
        return sum(len(o.entries) for o in self.outputs)


def index_one_shard(shard_name: str, stream: BinaryIO) -> List[RecordIndexEntry]:
    """Index a single shard from its header stream (no payload parsing)."""
    entries: List[RecordIndexEntry] = []
    current_key: Optional[str] = None
    start = end = 0
    payload = 0
    exts: List[str] = []

    def flush() -> None:
        if current_key is not None:
            entries.append(
                RecordIndexEntry(
                    key=current_key,
                    shard_name=shard_name,
                    payload_bytes=payload,
                    extensions=tuple(exts),
                    span_start=start,
                    span_end=end,
                    source_key=current_key,
                )
            )

    for span in iter_entry_spans(stream):
        if not span.isfile:
            continue
        key, ext = split_entry_path(span.path)
        if key != current_key:
            flush()
            current_key, start, payload, exts = key, span.offset, 0, []
        payload += span.size
        exts.append(ext)
        end = span.end_offset
    flush()
    return entries


def build_record_index(
    open_shard: ShardOpener,
    shard_names: Sequence[str],
    *,
    strict: bool = True,
) -> List[RecordIndexEntry]:
    """Stream every shard's headers; one entry per record, in
    (shard name, position) order.

    A key reappearing in a second shard is an error in strict mode; in
    permissive mode the later occurrences get ``#2``, ``#3``, … suffixes.
    """
    index: List[RecordIndexEntry] = []
    seen: Dict[str, Tuple[str, int]] = {}
    for shard_name in sorted(shard_names):
        with open_shard(shard_name) as stream:
            for entry in index_one_shard(shard_name, stream):
                prior = seen.get(entry.key)
                if prior is None:
                    seen[entry.key] = (entry.shard_name, 1)
                elif strict:
                    raise DuplicateKeyError(
                        f"record key {entry.key!r} appears in both "
                        f"{prior[0]!r} and {entry.shard_name!r}"
                    )
                else:
                    count = prior[1] + 1
                    seen[entry.key] = (prior[0], count)
                    entry = replace(entry, key=f"{entry.key}#{count}")
                index.append(entry)
    return index


def plan_reshard(index: Sequence[RecordIndexEntry], spec: ReshardSpec) -> ReshardPlan:
    """Order the index and pack it greedily into named output shards.

    Packing accounts in payload bytes.  A shard closes when it already
    holds a record and the next one would push it past the target, so a
    single oversize record still lands in a shard of its own.  The tail
    shard may undercut ``min_shard_bytes``; records are never
    redistributed to pad it.
    """
    if not index:
        raise ReshardError("cannot plan over an empty record index")
    kind, seed = parse_order(spec.order)
    if kind == "key":
        ordered = sorted(index, key=lambda e: e.key)
    else:
        ordered = permuted(index, seed)

    outputs: List[OutputShard] = []
    bucket: List[RecordIndexEntry] = []
    bucket_payload = 0

    def close() -> None:
        nonlocal bucket, bucket_payload
        if bucket:
            outputs.append(
                OutputShard(name=spec.template % len(outputs), entries=tuple(bucket))
            )
            bucket, bucket_payload = [], 0

    for entry in ordered:
        if bucket and bucket_payload + entry.payload_bytes > spec.target_shard_bytes:
            close()
        bucket.append(entry)
        bucket_payload += entry.payload_bytes
    close()
    return ReshardPlan(spec=spec, outputs=tuple(outputs))


def records_from_span(data: bytes, *, strict: bool = True) -> List[Record]:
    """Parse a record's byte span; a trailer makes the fragment a full tar."""
    return list(read_shard(io.BytesIO(data + TRAILER), strict=strict))


@dataclass
class _JobState:
    completed: List[str]
    lock: threading.Lock


def _load_manifest(client: StoreClient, spec: ReshardSpec) -> List[str]:
    try:
        raw = client.get(spec.dst_bucket, spec.manifest_name)
    except ObjectNotFoundError:
        return []
    manifest = json.loads(raw)
    if manifest.get("spec") != spec.to_dict():
        raise ReshardError(
            f"manifest {spec.manifest_name!r} belongs to a different job; "
            "delete it or change the destination"
        )
    return [str(n) for n in manifest.get("completed", [])]


def _store_manifest(
    client: StoreClient, spec: ReshardSpec, planned: int, completed: Sequence[str]
) -> None:
    body = json.dumps(
        {
            "schema": MANIFEST_SCHEMA,
            "spec": spec.to_dict(),
            "planned": planned,
            "completed": sorted(completed),
        },
        sort_keys=True,
    ).encode("utf-8")
    client.put(spec.dst_bucket, spec.manifest_name, body)


def _fetch_records(
    client: StoreClient, spec: ReshardSpec, shard: OutputShard
) -> Iterator[Record]:
    for entry in shard.entries:
        data = client.get(
            spec.src_bucket,
            entry.shard_name,
            byte_range=(entry.span_start, entry.span_end),
        )
        records = records_from_span(data)
        if len(records) != 1 or records[0].key != entry.source_key:
            got = [r.key for r in records]
            raise ReshardError(
                f"span {entry.span_start}..{entry.span_end} of "
                f"{entry.shard_name!r} yielded records {got!r}, "
                f"expected [{entry.source_key!r}]"
            )
        record = records[0]
        if record.key != entry.key:
            record = replace(record, key=entry.key)
        yield record


def execute_reshard(
    client: StoreClient,
    plan: ReshardPlan,
    *,
    workers: int = 4,
    per_target_inflight: int = 2,
    resume: bool = True,
) -> List[ShardStats]:
    """Build and upload every planned output shard; returns their stats.

    Shards already named in the job manifest are skipped (their stats are
    reconstructed from the plan).  Failures abort only the affected
    shards; everything completed stays, and the raised error names the
    casualties so a re-run can pick them up.
    """
    spec = plan.spec
    completed = _load_manifest(client, spec) if resume else []
    state = _JobState(completed=list(completed), lock=threading.Lock())

    cmap = client.cluster_map()
    policy = client.bucket_policy(spec.dst_bucket)
    gates: Dict[str, threading.Semaphore] = {
        t.id: threading.Semaphore(per_target_inflight) for t in cmap.targets
    }

    def build(shard: OutputShard) -> ShardStats:
        primary = replica_set(cmap, ObjectRef(spec.dst_bucket, shard.name), policy)[0]
        with gates[primary.id]:
            with SpooledTemporaryFile(max_size=SPOOL_LIMIT) as spool:
                stats = write_shard(
                    _fetch_records(client, spec, shard), spool, name=shard.name
                )
                client.put_file(spec.dst_bucket, shard.name, spool)
        with state.lock:
            state.completed.append(shard.name)
            _store_manifest(client, spec, len(plan.outputs), state.completed)
        return stats

    results: Dict[str, ShardStats] = {}
    failures: Dict[str, Exception] = {}
    pending = [o for o in plan.outputs if o.name not in set(completed)]
    if pending:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(build, shard): shard for shard in pending}
            for future, shard in futures.items():
                try:
                    results[shard.name] = future.result()
                except Exception as exc:  # noqa: BLE001 - collected and re-raised
                    failures[shard.name] = exc
                    log.warning("output shard %s failed: %s", shard.name, exc)
    if failures:
        names = ", ".join(sorted(failures))
        raise ReshardError(
            f"{len(failures)} output shard(s) failed ({names}); "
            f"first error: {next(iter(failures.values()))}"
        ) from next(iter(failures.values()))

    stats: List[ShardStats] = []
    for shard in plan.outputs:
        if shard.name in results:
            stats.append(results[shard.name])
        else:
            # Completed in an earlier run; reconstruct accounting from the
            # plan rather than re-reading the object.
            stats.append(
                ShardStats(
                    name=shard.name,
                    record_count=len(shard.entries),
                    payload_bytes=shard.payload_bytes,
                    serialized_bytes=0,
                )
            )
    return stats


def cluster_shard_opener(
    client: StoreClient, bucket: str
) -> ShardOpener:
    """Opener for shards living in the object store."""

    def open_shard(name: str):
        return client.open_stream(bucket, name)

    return open_shard


def list_source_shards(client: StoreClient, bucket: str, prefix: str) -> List[str]:
    names = [name for name, _ in client.list(bucket, prefix=prefix)]
    if not names:
        raise ReshardError(f"no source shards under {bucket}/{prefix}")
    return sorted(names)


def reshard(
    client: StoreClient,
    spec: ReshardSpec,
    *,
    workers: int = 4,
    per_target_inflight: int = 2,
    resume: bool = True,
    strict: bool = True,
) -> List[ShardStats]:
    """Index, plan, and execute in one call (the CLI entry point)."""
    shards = list_source_shards(client, spec.src_bucket, spec.src_prefix)
    index = build_record_index(
        cluster_shard_opener(client, spec.src_bucket), shards, strict=strict
    )
    plan = plan_reshard(index, spec)
    return execute_reshard(
        client,
        plan,
        workers=workers,
        per_target_inflight=per_target_inflight,
        resume=resume,
    )
