"""Streaming dataset consumption: shuffle, shard, read, batch.

An epoch is consumed in two shuffling stages.  First the shard list is
permuted with a seed derived from (seed, epoch), and workers take every
num_workers-th shard of that order, which keeps reads whole-shard
sequential.  Second, each worker pushes its records through a bounded
shuffle buffer that approximates global random order with fixed memory.
All randomness comes from the package's portable generator, so a given
(seed, epoch, worker) replays exactly, on any platform.

Worker streams are deterministic in isolation; consuming them in thread
parallel (``ParallelBatcher``) interleaves batches in arrival order and
is meant for throughput, not reproducibility.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import queue
import threading
import time
import urllib.request
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import (
    Any,
    BinaryIO,
    Callable,
    ContextManager,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    TypeVar,
)

from .cluster.client import StoreClient
from .errors import ShardstoreError
from .records import Record
from .rng import SplitMix64, mix64, permuted
from .tario import read_shard

log = logging.getLogger(__name__)

T = TypeVar("T")
U = TypeVar("U")

Batch = List[Record]


@dataclass(frozen=True)
class EpochPlan:
    """Deterministic shard order and worker assignment for one epoch."""

    seed: int
    epoch: int
    shard_order: Tuple[str, ...]
    num_workers: int

    def worker_slice(self, worker: int) -> Tuple[str, ...]:
        """Shards for one worker: every ``num_workers``-th position."""
        if not 0 <= worker < self.num_workers:
            raise ValueError(
                f"worker {worker} out of range for {self.num_workers} workers"
            )
        return self.shard_order[worker :: self.num_workers]

    @property
    def worker_slices(self) -> Tuple[Tuple[str, ...], ...]:
        return tuple(self.worker_slice(w) for w in range(self.num_workers))


def make_epoch_plan(
    shards: Sequence[str], seed: int, epoch: int, num_workers: int = 1
) -> EpochPlan:
    """Permute the (sorted) shard list for an epoch and slice it.

    The permutation is seeded by folding (seed, epoch), so every epoch
    reshuffles and the same inputs always produce the same plan.
    """
    if not shards:
        raise ShardstoreError("cannot plan an epoch over zero shards")
    if num_workers < 1:
        raise ShardstoreError(f"num_workers must be >= 1, got {num_workers}")
    if epoch < 0:
        raise ShardstoreError(f"epoch must be >= 0, got {epoch}")
    order = permuted(sorted(shards), mix64(seed, epoch))
    return EpochPlan(
        seed=seed,
        epoch=epoch,
        shard_order=tuple(order),
        num_workers=num_workers,
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for one consumption pipeline."""

    batch_size: int = 256
    shuffle_capacity: int = 1000
    num_workers: int = 1
    drop_last: bool = False
    strict: bool = True
    map_parallelism: int = 1
    map_ordered: bool = True
    on_error: str = "abort"  # or "skip": log and continue past bad shards

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ShardstoreError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.shuffle_capacity < 1:
            raise ShardstoreError(
                f"shuffle_capacity must be >= 1, got {self.shuffle_capacity}"
            )
        if self.num_workers < 1:
            raise ShardstoreError(f"num_workers must be >= 1, got {self.num_workers}")
        if self.on_error not in ("abort", "skip"):
            raise ShardstoreError(f"on_error must be abort or skip: {self.on_error}")


class ShardSource(Protocol):
    """Anything that can open a named shard as a byte stream."""

    def open(self, shard: str) -> ContextManager[BinaryIO]: ...

    def list_shards(self) -> List[str]: ...


class DirectorySource:
    """Shards are files under one directory."""

    def __init__(self, root: Path, pattern: str = "*.tar"):
        self.root = Path(root)
        self.pattern = pattern

    def open(self, shard: str) -> ContextManager[BinaryIO]:
        return open(self.root / shard, "rb")

    def list_shards(self) -> List[str]:
        return sorted(p.name for p in self.root.glob(self.pattern) if p.is_file())


class ClusterSource:
    """Shards are objects under a bucket prefix, streamed via redirects."""

    def __init__(self, client: StoreClient, bucket: str, prefix: str = ""):
        self.client = client
        self.bucket = bucket
        self.prefix = prefix

    def open(self, shard: str) -> ContextManager[BinaryIO]:
        return self.client.open_stream(self.bucket, shard)

    def list_shards(self) -> List[str]:
        return sorted(
            name for name, _ in self.client.list(self.bucket, prefix=self.prefix)
        )


class PathSource:
    """Shard names are themselves local paths or http(s) URLs."""

    def __init__(self, shards: Sequence[str] = ()):
        self.shards = list(shards)

    def open(self, shard: str) -> ContextManager[BinaryIO]:
        if shard.startswith(("http://", "https://")):
            # urlopen follows the gateway's 307 on its own.
            return contextlib.closing(urllib.request.urlopen(shard))
        return open(shard, "rb")

    def list_shards(self) -> List[str]:
        return list(self.shards)


def open_record_stream(
    source: ShardSource,
    shards: Sequence[str],
    *,
    strict: bool = True,
    on_error: str = "abort",
) -> Iterator[Record]:
    """Concatenate whole-shard record streams in the given order.

    Each shard is one sequential read; records are never fetched
    individually.  ``on_error="skip"`` logs an unreadable shard and moves
    on; the default aborts.
    """
    for shard in shards:
        try:
            with source.open(shard) as stream:
                yield from read_shard(stream, strict=strict)
        except Exception as exc:  # noqa: BLE001 - policy-controlled skip
            if on_error != "skip":
                raise
            # Records already yielded from a shard that breaks midway stay
            # consumed; the rest of that shard is abandoned.
            log.warning("skipping unreadable shard %s: %s", shard, exc)


def shuffle_stream(
    stream: Iterable[T], capacity: int, seed: int
) -> Iterator[T]:
    """Approximate-random reorder through a bounded reservoir.

    The buffer is topped up to ``capacity``, then one uniformly chosen
    element is emitted (swap-with-last extraction) and the space refilled.
    Capacity 1 degenerates to the input order; capacity >= stream length
    yields the full seeded permutation.  Every element passes through
    exactly once.
    """
    if capacity < 1:
        raise ShardstoreError(f"capacity must be >= 1, got {capacity}")
    rng = SplitMix64(seed)
    buffer: List[T] = []
    it = iter(stream)
    exhausted = False
    while True:
        while not exhausted and len(buffer) < capacity:
            try:
                buffer.append(next(it))
            except StopIteration:
                exhausted = True
        if not buffer:
            return
        j = rng.randbelow(len(buffer))
        item = buffer[j]
        buffer[j] = buffer[-1]
        buffer.pop()
        yield item


def map_stream(
    stream: Iterable[T],
    transform: Callable[[T], U],
    *,
    parallelism: int = 1,
    ordered: bool = True,
    on_error: str = "abort",
    stats: Optional[Dict[str, int]] = None,
) -> Iterator[U]:
    """Apply a transform, optionally with thread parallelism.

    Ordered mode preserves input order regardless of parallelism (so a
    parallel run equals a serial one); completion-order mode yields
    whatever finishes first.  Failed items abort by default, or are
    counted into ``stats["skipped"]`` with ``on_error="skip"``.
    """

    def attempt(item: T) -> Tuple[bool, Any]:
        try:
            return True, transform(item)
        except Exception as exc:  # noqa: BLE001 - policy-controlled skip
            if on_error != "skip":
                raise
            if stats is not None:
                stats["skipped"] = stats.get("skipped", 0) + 1
            log.warning("transform failed, skipping item: %s", exc)
            return False, None

    if parallelism <= 1:
        for item in stream:
            ok, value = attempt(item)
            if ok:
                yield value
        return

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        if ordered:
            window: deque = deque()
            for item in stream:
                window.append(pool.submit(attempt, item))
                if len(window) >= parallelism:
                    ok, value = window.popleft().result()
                    if ok:
                        yield value
            while window:
                ok, value = window.popleft().result()
                if ok:
                    yield value
        else:
            pending: set = set()
            for item in stream:
                pending.add(pool.submit(attempt, item))
                if len(pending) >= parallelism:
                    finished, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for future in finished:
                        ok, value = future.result()
                        if ok:
                            yield value
            for future in pending:
                ok, value = future.result()
                if ok:
                    yield value


def batch_stream(
    stream: Iterable[T], batch_size: int, *, drop_last: bool = False
) -> Iterator[List[T]]:
    """Group consecutive items into fixed-size lists."""
    if batch_size < 1:
        raise ShardstoreError(f"batch_size must be >= 1, got {batch_size}")
    batch: List[T] = []
    for item in stream:
        batch.append(item)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch and not drop_last:
        yield batch


def iter_worker_batches(
    source: ShardSource,
    plan: EpochPlan,
    config: PipelineConfig,
    worker: int,
    *,
    transform: Optional[Callable[[Record], Any]] = None,
) -> Iterator[Batch]:
    """One worker's deterministic batch stream for one epoch."""
    stream: Iterator[Any] = open_record_stream(
        source,
        plan.worker_slice(worker),
        strict=config.strict,
        on_error=config.on_error,
    )
    stream = shuffle_stream(
        stream,
        config.shuffle_capacity,
        mix64(plan.seed, plan.epoch, worker),
    )
    if transform is not None:
        stream = map_stream(
            stream,
            transform,
            parallelism=config.map_parallelism,
            ordered=config.map_ordered,
            on_error=config.on_error,
        )
    return batch_stream(stream, config.batch_size, drop_last=config.drop_last)


def iter_epoch_batches(
    source: ShardSource,
    shards: Sequence[str],
    config: PipelineConfig,
    seed: int,
    epoch: int,
    *,
    transform: Optional[Callable[[Record], Any]] = None,
) -> Iterator[Batch]:
    """All workers' batches for one epoch, workers chained in order.

    Sequential and fully deterministic; use ``ParallelBatcher`` when
    throughput matters more than replayability.
    """
    plan = make_epoch_plan(shards, seed, epoch, config.num_workers)
    for worker in range(config.num_workers):
        yield from iter_worker_batches(
            source, plan, config, worker, transform=transform
        )


def iter_batches(
    source: ShardSource,
    shards: Sequence[str],
    config: PipelineConfig,
    seed: int,
    *,
    start_epoch: int = 0,
    max_epochs: Optional[int] = None,
    transform: Optional[Callable[[Record], Any]] = None,
) -> Iterator[Batch]:
    """Epoch-chained batch stream; each epoch reshuffles with epoch+1."""
    epochs = (
        range(start_epoch, start_epoch + max_epochs)
        if max_epochs is not None
        else itertools.count(start_epoch)
    )
    for epoch in epochs:
        yield from iter_epoch_batches(
            source, shards, config, seed, epoch, transform=transform
        )


class ParallelBatcher:
    """Worker threads feeding one bounded batch queue.

    Each worker owns its shard slice per epoch and advances through
    epochs independently (no cross-worker alignment), pushing finished
    batches into the queue the consumer drains.  Arrival order is racy by
    design; per-worker content is still seed-deterministic.
    """

    _DONE = object()

    def __init__(
        self,
        source_factory: Callable[[], ShardSource],
        shards: Sequence[str],
        config: PipelineConfig,
        seed: int,
        *,
        start_epoch: int = 0,
        max_epochs: Optional[int] = None,
        queue_depth: int = 16,
        transform: Optional[Callable[[Record], Any]] = None,
        continuous: bool = False,
    ):
        self._queue: "queue.Queue[object]" = queue.Queue(maxsize=queue_depth)
        self._stop = threading.Event()
        self._errors: List[Exception] = []
        self._threads: List[threading.Thread] = []
        self._config = config
        self._continuous = continuous
        for worker in range(config.num_workers):
            thread = threading.Thread(
                target=self._run_worker,
                args=(
                    source_factory,
                    tuple(shards),
                    seed,
                    start_epoch,
                    max_epochs,
                    worker,
                    transform,
                ),
                name=f"loader-worker-{worker}",
                daemon=True,
            )
            self._threads.append(thread)
        for thread in self._threads:
            thread.start()

    def _worker_records(
        self,
        source: ShardSource,
        shards: Tuple[str, ...],
        seed: int,
        epoch: int,
        worker: int,
    ) -> Iterator[Record]:
        plan = make_epoch_plan(shards, seed, epoch, self._config.num_workers)
        stream = open_record_stream(
            source,
            plan.worker_slice(worker),
            strict=self._config.strict,
            on_error=self._config.on_error,
        )
        return shuffle_stream(
            stream, self._config.shuffle_capacity, mix64(seed, epoch, worker)
        )

    def _run_worker(
        self,
        source_factory: Callable[[], ShardSource],
        shards: Tuple[str, ...],
        seed: int,
        start_epoch: int,
        max_epochs: Optional[int],
        worker: int,
        transform: Optional[Callable[[Record], Any]],
    ) -> None:
        try:
            source = source_factory()
            epochs: Iterable[int] = (
                range(start_epoch, start_epoch + max_epochs)
                if max_epochs is not None
                else itertools.count(start_epoch)
            )
            if self._continuous:
                # One unbroken record stream across epochs: every batch is
                # exactly batch_size, which fixed-iteration benchmarks need.
                records: Iterator[Record] = itertools.chain.from_iterable(
                    self._worker_records(source, shards, seed, epoch, worker)
                    for epoch in epochs
                )
                if transform is not None:
                    records = map_stream(
                        records,
                        transform,
                        parallelism=self._config.map_parallelism,
                        ordered=self._config.map_ordered,
                        on_error=self._config.on_error,
                    )
                for batch in batch_stream(records, self._config.batch_size):
                    if not self._put(batch):
                        return
            else:
                for epoch in epochs:
                    plan = make_epoch_plan(
                        shards, seed, epoch, self._config.num_workers
                    )
                    for batch in iter_worker_batches(
                        source, plan, self._config, worker, transform=transform
                    ):
                        if not self._put(batch):
                            return
        except Exception as exc:  # noqa: BLE001 - forwarded to the consumer
            self._errors.append(exc)
        finally:
            self._put(self._DONE, is_sentinel=True)

    def _put(self, item: object, is_sentinel: bool = False) -> bool:
        # Sentinels must always land (the consumer counts them); batches
        # stop flowing as soon as close() is requested.
        while True:
            if self._stop.is_set() and not is_sentinel:
                return False
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Batch]:
        live = len(self._threads)
        while live:
            item = self._queue.get()
            if item is self._DONE:
                live -= 1
                if self._errors:
                    raise self._errors[0]
                continue
            yield item  # type: ignore[misc]

    def peek_first(self, timeout: Optional[float] = None) -> None:
        """Block until the first batch is queued without consuming it.

        Lets a benchmark exclude pipeline warm-up from its timed window.
        """
        t0 = time.monotonic()
        while self._queue.empty():
            if self._errors:
                raise self._errors[0]
            if not any(t.is_alive() for t in self._threads):
                raise ShardstoreError("pipeline ended before the first batch")
            if timeout is not None and time.monotonic() - t0 > timeout:
                raise TimeoutError("no batch arrived within the warm-up window")
            time.sleep(0.005)

    def close(self) -> None:
        self._stop.set()
        # Keep draining so blocked workers can push their sentinels out.
        while any(t.is_alive() for t in self._threads):
            try:
                self._queue.get(timeout=0.05)
            except queue.Empty:
                pass
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        for thread in self._threads:
            thread.join(timeout=5.0)

    def __enter__(self) -> "ParallelBatcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
