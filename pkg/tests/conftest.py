"""Shared corpus builders and cluster fixtures."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Dict, List, Optional

import pytest

from shardstore.cluster import LocalCluster
from shardstore.records import Record
from shardstore.rng import SplitMix64, mix64
from shardstore.tario import write_shard

CORPUS_EXTS = ("png", "cls", "json")


def build_corpus(
    seed: int,
    n_records: int,
    *,
    min_components: int = 1,
    max_components: int = 3,
    max_size: int = 2048,
    key_prefix: str = "sample",
) -> List[Record]:
    """Deterministic synthetic records: varied component sets and sizes."""
    rng = SplitMix64(mix64(seed, 0xC0DE))
    records = []
    for i in range(n_records):
        n_comp = min_components + rng.randbelow(max_components - min_components + 1)
        components: Dict[str, bytes] = {}
        for ext in CORPUS_EXTS[:n_comp]:
            size = rng.randbelow(max_size + 1)
            fill = bytes([rng.next_u64() & 0xFF])
            components[ext] = fill * size
        records.append(Record(key=f"{key_prefix}-{i:06d}", components=components))
    return records


def shard_bytes(records: List[Record]) -> bytes:
    buf = io.BytesIO()
    write_shard(records, buf)
    return buf.getvalue()


def seed_bucket(
    client,
    bucket: str,
    *,
    seed: int = 0,
    shards: int = 8,
    records_per_shard: int = 20,
    prefix: str = "",
    max_size: int = 1024,
) -> List[str]:
    """Create a bucket holding synthetic shards; returns shard names."""
    client.create_bucket(bucket)
    names = []
    for s in range(shards):
        records = build_corpus(
            mix64(seed, s), records_per_shard,
            max_size=max_size, key_prefix=f"s{s:03d}",
        )
        name = f"{prefix}shard-{s:06d}.tar"
        client.put(bucket, name, shard_bytes(records))
        names.append(name)
    return names


@pytest.fixture
def cluster(tmp_path: Path):
    with LocalCluster(tmp_path / "cluster", targets=3, gateways=1) as c:
        yield c


@pytest.fixture
def cluster_factory(tmp_path: Path):
    """Build clusters with custom shapes; all stopped at test end."""
    made: List[LocalCluster] = []

    def make(**kwargs) -> LocalCluster:
        root = tmp_path / f"cluster{len(made)}"
        c = LocalCluster(root, **kwargs)
        made.append(c)
        return c

    yield make
    for c in made:
        c.stop()
