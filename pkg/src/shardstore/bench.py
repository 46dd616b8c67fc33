"""Benchmarks: raw delivery rate, training-loop rate, dataset inflation.

Delivery mode measures the storage side alone: many workers fetch whole
randomly chosen shards through the gateway redirect path and throw the
bytes away.  Loop mode measures the full consumption pipeline: a timed
window of fixed-size batches, with pipeline warm-up excluded by waiting
for the first batch before the clock starts.  Reports carry both the
client-side byte counts and per-target/per-mountpath deltas from the
servers' own metrics, so the two accountings can be cross-checked.

MB in reports is decimal (1 MB = 10**6 bytes).
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from tempfile import SpooledTemporaryFile
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from .cluster.client import StoreClient
from .errors import BenchError
from .loader import ParallelBatcher, PipelineConfig, ShardSource
from .records import Record
from .rng import SplitMix64, mix64
from .tario import ShardStats, pack_records, read_shard

log = logging.getLogger(__name__)

MB = 1_000_000
REPORT_SCHEMA = 1


@dataclass(frozen=True)
class BenchConfig:
    """Shared knob set for both bench modes."""

    mode: str  # "delivery" or "loop"
    bucket: str
    prefix: str = ""
    consumers: int = 1
    workers_per_consumer: int = 5
    batch_size: int = 256
    iterations: int = 200
    seconds: Optional[float] = None
    shard_count: Optional[int] = None
    seed: int = 0
    with_replacement: bool = True
    shuffle_capacity: int = 1000
    avg_sample_bytes: Optional[float] = None
    consumer_rate_limit_mbps: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode not in ("delivery", "loop"):
            raise BenchError(f"mode must be delivery or loop, got {self.mode!r}")
        for name in ("consumers", "workers_per_consumer", "batch_size", "iterations"):
            if getattr(self, name) < 1:
                raise BenchError(f"{name} must be >= 1")
        if self.mode == "delivery" and self.seconds is None and self.shard_count is None:
            raise BenchError("delivery mode needs a stop condition (seconds or shard_count)")


@dataclass
class WorkerResult:
    worker: int
    bytes: int
    seconds: float
    ops: int


@dataclass
class BenchReport:
    """Everything a bench run measured, JSON- and CSV-serializable."""

    mode: str
    valid: bool
    wall_seconds: float
    total_bytes: int
    per_worker: List[WorkerResult]
    per_target_mb_per_s: Dict[str, float] = field(default_factory=dict)
    per_mountpath_mb_per_s: Dict[str, float] = field(default_factory=dict)
    samples_consumed: Optional[int] = None
    avg_sample_bytes: Optional[float] = None
    error: Optional[str] = None
    params: Dict[str, object] = field(default_factory=dict)

    @property
    def aggregate_mb_per_s(self) -> float:
        if self.wall_seconds <= 0:
            return 0.0
        return self.total_bytes / self.wall_seconds / MB

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "valid": self.valid,
            "error": self.error,
            "wall_seconds": self.wall_seconds,
            "total_bytes": self.total_bytes,
            "aggregate_mb_per_s": self.aggregate_mb_per_s,
            "samples_consumed": self.samples_consumed,
            "avg_sample_bytes": self.avg_sample_bytes,
            "per_worker": [
                {
                    "worker": w.worker,
                    "bytes": w.bytes,
                    "seconds": w.seconds,
                    "ops": w.ops,
                }
                for w in self.per_worker
            ],
            "per_target_mb_per_s": dict(sorted(self.per_target_mb_per_s.items())),
            "per_mountpath_mb_per_s": dict(
                sorted(self.per_mountpath_mb_per_s.items())
            ),
            "params": self.params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> List[List[object]]:
        rows: List[List[object]] = [["row", "worker", "bytes", "seconds", "mb_per_s"]]
        for w in self.per_worker:
            rate = w.bytes / w.seconds / MB if w.seconds > 0 else 0.0
            rows.append(["worker", w.worker, w.bytes, f"{w.seconds:.6f}", f"{rate:.3f}"])
        rows.append(
            [
                "total",
                "",
                self.total_bytes,
                f"{self.wall_seconds:.6f}",
                f"{self.aggregate_mb_per_s:.3f}",
            ]
        )
        return rows


def emit_report(report: BenchReport, fmt: str, path: Path) -> None:
    """Write a report file; ``fmt`` is ``json`` or ``csv``."""
    path = Path(path)
    if fmt == "json":
        path.write_text(report.to_json() + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows(report.csv_rows())
    else:
        raise BenchError(f"unknown report format {fmt!r}")


# -- server-side counters ---------------------------------------------------


def _mountpath_counters(client: StoreClient) -> Dict[str, Dict[str, int]]:
    """Snapshot bytes_read/bytes_written per "target:mountpath"."""
    out: Dict[str, Dict[str, int]] = {}
    for target in client.cluster_map().targets:
        metrics = client.metrics(target.endpoint)
        for mp, counters in metrics["mountpaths"].items():  # type: ignore[index]
            out[f"{target.id}:{mp}"] = {
                "bytes_read": int(counters["bytes_read"]),
                "bytes_written": int(counters["bytes_written"]),
            }
    return out


def _throughput_deltas(
    before: Dict[str, Dict[str, int]],
    after: Dict[str, Dict[str, int]],
    wall: float,
) -> Tuple[Dict[str, float], Dict[str, float]]:
    per_mountpath: Dict[str, float] = {}
    per_target: Dict[str, float] = {}
    for key, counters in after.items():
        read_delta = counters["bytes_read"] - before.get(key, {}).get("bytes_read", 0)
        rate = read_delta / wall / MB if wall > 0 else 0.0
        per_mountpath[key] = rate
        target_id = key.split(":", 1)[0]
        per_target[target_id] = per_target.get(target_id, 0.0) + rate
    return per_target, per_mountpath


# -- delivery mode ----------------------------------------------------------


def run_delivery_bench(
    client_factory: Callable[[], StoreClient], config: BenchConfig
) -> BenchReport:
    """Fetch whole random shards and discard them until the stop condition.

    Workers are fully independent: each has its own client (and so its
    own connections) and a private PRNG stream.  Any worker error stops
    the whole run and flags the report invalid.
    """
    if config.mode != "delivery":
        raise BenchError("run_delivery_bench needs a delivery-mode config")
    admin = client_factory()
    try:
        names = [n for n, _ in admin.list(config.bucket, prefix=config.prefix)]
        params: Dict[str, object] = {
            "bucket": config.bucket,
            "prefix": config.prefix,
            "consumers": config.consumers,
            "workers_per_consumer": config.workers_per_consumer,
            "seconds": config.seconds,
            "shard_count": config.shard_count,
            "seed": config.seed,
            "shards_visible": len(names),
        }
        total_workers = config.consumers * config.workers_per_consumer
        if not names:
            return BenchReport(
                mode="delivery",
                valid=False,
                error="no shards under the given bucket/prefix",
                wall_seconds=0.0,
                total_bytes=0,
                per_worker=[],
                params=params,
            )

        stop = threading.Event()
        fetched_total = [0]
        fetched_lock = threading.Lock()
        errors: List[str] = []
        results: List[Optional[WorkerResult]] = [None] * total_workers
        deadline: Optional[float] = None

        def worker_loop(index: int, client: StoreClient) -> None:
            rng = SplitMix64(mix64(config.seed, index))
            order: Optional[List[str]] = None
            if not config.with_replacement:
                order = list(names)
                rng_local = SplitMix64(mix64(config.seed, index, 1))
                rng_local.shuffle(order)
            got = 0
            ops = 0
            picks = 0

            def sink(chunk: bytes) -> None:
                nonlocal got
                got += len(chunk)

            t0 = time.perf_counter()
            try:
                while not stop.is_set():
                    if deadline is not None and time.perf_counter() >= deadline:
                        break
                    if config.shard_count is not None:
                        with fetched_lock:
                            if fetched_total[0] >= config.shard_count:
                                break
                            fetched_total[0] += 1
                    if order is not None:
                        name = order[picks % len(order)]
                        picks += 1
                    else:
                        name = names[rng.randbelow(len(names))]
                    client.get_to(config.bucket, name, sink)
                    ops += 1
            except Exception as exc:  # noqa: BLE001 - aborts the bench
                errors.append(f"worker {index}: {exc}")
                stop.set()
            finally:
                results[index] = WorkerResult(
                    worker=index,
                    bytes=got,
                    seconds=time.perf_counter() - t0,
                    ops=ops,
                )
                client.close()

        before = _mountpath_counters(admin)
        clients = [client_factory() for _ in range(total_workers)]
        threads = [
            threading.Thread(
                target=worker_loop, args=(i, clients[i]), name=f"bench-worker-{i}"
            )
            for i in range(total_workers)
        ]
        wall_start = time.perf_counter()
        if config.seconds is not None:
            deadline = wall_start + config.seconds
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        wall = time.perf_counter() - wall_start
        after = _mountpath_counters(admin)

        workers = [r for r in results if r is not None]
        total_bytes = sum(w.bytes for w in workers)
        per_target, per_mountpath = _throughput_deltas(before, after, wall)
        return BenchReport(
            mode="delivery",
            valid=not errors and total_bytes > 0,
            error="; ".join(errors) or None,
            wall_seconds=wall,
            total_bytes=total_bytes,
            per_worker=workers,
            per_target_mb_per_s=per_target,
            per_mountpath_mb_per_s=per_mountpath,
            params=params,
        )
    finally:
        admin.close()


# -- loop mode ---------------------------------------------------------------


class _ConsumerLimiter:
    """Caps one consumer's sample-byte intake (GPU-speed emulation)."""

    def __init__(self, mbps: float):
        self.bytes_per_sec = mbps * MB
        self._reserved = time.monotonic()

    def throttle(self, nbytes: int) -> None:
        now = time.monotonic()
        end = max(now, self._reserved) + nbytes / self.bytes_per_sec
        self._reserved = end
        if end > now:
            time.sleep(end - now)


def run_loop_bench(
    source_factory: Callable[[], ShardSource],
    shards: Sequence[str],
    config: BenchConfig,
    *,
    metrics_client: Optional[StoreClient] = None,
    warmup_timeout: float = 120.0,
) -> BenchReport:
    """Time exactly ``iterations`` batches per consumer through the pipeline.

    Each consumer runs its own worker threads and its own clock; the
    clock starts only once the first batch is already waiting, so filling
    the pipeline is not billed.  The dataset wraps across epochs (with
    reshuffling) when it is smaller than the demanded sample count.
    """
    if config.mode != "loop":
        raise BenchError("run_loop_bench needs a loop-mode config")
    shard_list = list(shards)
    if not shard_list:
        return BenchReport(
            mode="loop",
            valid=False,
            error="no shards to consume",
            wall_seconds=0.0,
            total_bytes=0,
            per_worker=[],
            params={"bucket": config.bucket, "prefix": config.prefix},
        )

    pipeline_config = PipelineConfig(
        batch_size=config.batch_size,
        shuffle_capacity=config.shuffle_capacity,
        num_workers=config.workers_per_consumer,
    )
    errors: List[str] = []
    results: List[Optional[WorkerResult]] = [None] * config.consumers
    sample_counts = [0] * config.consumers

    def consume(consumer: int) -> None:
        limiter = (
            _ConsumerLimiter(config.consumer_rate_limit_mbps)
            if config.consumer_rate_limit_mbps
            else None
        )
        try:
            with ParallelBatcher(
                source_factory,
                shard_list,
                pipeline_config,
                seed=mix64(config.seed, consumer),
                continuous=True,
            ) as batches:
                batches.peek_first(timeout=warmup_timeout)
                samples = 0
                payload = 0
                iterator = iter(batches)
                t0 = time.perf_counter()
                for _ in range(config.iterations):
                    batch = next(iterator)
                    samples += len(batch)
                    batch_bytes = sum(r.payload_bytes for r in batch)
                    payload += batch_bytes
                    if limiter is not None:
                        limiter.throttle(batch_bytes)
                elapsed = time.perf_counter() - t0
            results[consumer] = WorkerResult(
                worker=consumer, bytes=payload, seconds=elapsed, ops=config.iterations
            )
            sample_counts[consumer] = samples
        except Exception as exc:  # noqa: BLE001 - aborts the bench
            errors.append(f"consumer {consumer}: {exc}")

    before = _mountpath_counters(metrics_client) if metrics_client else {}
    wall_start = time.perf_counter()
    threads = [
        threading.Thread(target=consume, args=(c,), name=f"bench-consumer-{c}")
        for c in range(config.consumers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - wall_start
    after = _mountpath_counters(metrics_client) if metrics_client else {}

    consumers = [r for r in results if r is not None]
    samples_consumed = sum(sample_counts)
    consumed_payload = sum(c.bytes for c in consumers)
    if config.avg_sample_bytes is not None:
        avg = config.avg_sample_bytes
    elif samples_consumed:
        avg = consumed_payload / samples_consumed
    else:
        avg = 0.0
    # The timed window is each consumer's own clock; the aggregate uses
    # the slowest consumer so the identity bytes = rate * wall holds.
    window = max((c.seconds for c in consumers), default=0.0)
    total_bytes = int(round(samples_consumed * avg))
    per_target, per_mountpath = (
        _throughput_deltas(before, after, wall) if metrics_client else ({}, {})
    )
    return BenchReport(
        mode="loop",
        valid=not errors and samples_consumed > 0,
        error="; ".join(errors) or None,
        wall_seconds=window,
        total_bytes=total_bytes,
        per_worker=consumers,
        per_target_mb_per_s=per_target,
        per_mountpath_mb_per_s=per_mountpath,
        samples_consumed=samples_consumed,
        avg_sample_bytes=avg,
        params={
            "bucket": config.bucket,
            "prefix": config.prefix,
            "consumers": config.consumers,
            "workers_per_consumer": config.workers_per_consumer,
            "batch_size": config.batch_size,
            "iterations": config.iterations,
            "seed": config.seed,
        },
    )


# -- dataset inflation --------------------------------------------------------


def inflate_records(
    record_source: Callable[[], Iterator[Record]], factor: int, seed: int
) -> Iterator[Record]:
    """Duplicate every source record ``factor`` times under fresh keys.

    Keys are 128-bit random hex names from a seeded stream; a collision
    (astronomically unlikely, but checked) retries a bounded number of
    times.  Component bytes are copied verbatim.
    """
    if factor < 1:
        raise BenchError(f"factor must be >= 1, got {factor}")
    rng = SplitMix64(mix64(seed, 0xDA7A))
    used: set = set()
    for _ in range(factor):
        for record in record_source():
            for _attempt in range(8):
                key = rng.hex_name(128)
                if key not in used:
                    break
            else:
                raise BenchError("random key space exhausted (collisions)")
            used.add(key)
            yield Record(key=key, components=dict(record.components))


def read_shard_dir_records(root: Path, pattern: str = "*.tar") -> Iterator[Record]:
    for path in sorted(Path(root).glob(pattern)):
        with open(path, "rb") as f:
            yield from read_shard(f)


def read_bucket_records(
    client: StoreClient, bucket: str, prefix: str
) -> Iterator[Record]:
    for name, _ in client.list(bucket, prefix=prefix):
        with client.open_stream(bucket, name) as stream:
            yield from read_shard(stream)


def inflate_dataset(
    record_source: Callable[[], Iterator[Record]],
    factor: int,
    seed: int,
    target_shard_bytes: int,
    emit: Callable[[str, SpooledTemporaryFile], None],
    *,
    template: str = "inflated-%06d.tar",
) -> List[ShardStats]:
    """Full inflation: duplicate under fresh names, repack, hand off."""
    return pack_records(
        inflate_records(record_source, factor, seed),
        target_shard_bytes,
        emit,
        template=template,
    )
