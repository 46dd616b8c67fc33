"""Resharding: planning hand-traces and a single-process reference."""

import io
import json
from contextlib import contextmanager
from typing import Dict, List

import pytest

from shardstore.errors import DuplicateKeyError, ReshardError
from shardstore.records import Record
from shardstore.reshard import (
    RecordIndexEntry,
    ReshardSpec,
    _store_manifest,
    build_record_index,
    execute_reshard,
    index_one_shard,
    list_source_shards,
    parse_order,
    plan_reshard,
    records_from_span,
    reshard,
)
from shardstore.tario import TRAILER, read_shard

from conftest import build_corpus, seed_bucket, shard_bytes

MASK = (1 << 64) - 1


def reference_permuted(items: List, seed: int) -> List:
    """Independent transcription of the seeded shuffle (splitmix64 +
    descending-index Fisher-Yates, modulo draw)."""
    out = list(items)
    state = seed & MASK
    for i in range(len(out) - 1, 0, -1):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        j = (z ^ (z >> 31)) % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def greedy_pack(records: List[Record], target: int) -> List[List[Record]]:
    """Reference packing: close a shard when the next record would pass
    the target and the shard is non-empty."""
    shards: List[List[Record]] = []
    bucket: List[Record] = []
    size = 0
    for rec in records:
        if bucket and size + rec.payload_bytes > target:
            shards.append(bucket)
            bucket, size = [], 0
        bucket.append(rec)
        size += rec.payload_bytes
    if bucket:
        shards.append(bucket)
    return shards


def make_index(payloads: List[int], prefix: str = "k") -> List[RecordIndexEntry]:
    return [
        RecordIndexEntry(
            key=f"{prefix}{i:04d}",
            shard_name="src.tar",
            payload_bytes=p,
            extensions=("bin",),
            span_start=0,
            span_end=p,
            source_key=f"{prefix}{i:04d}",
        )
        for i, p in enumerate(payloads)
    ]


def bytes_opener(shards: Dict[str, bytes]):
    @contextmanager
    def open_shard(name: str):
        yield io.BytesIO(shards[name])

    return open_shard


# -- order spec and job parameters ---------------------------------------


def test_parse_order():
    assert parse_order("key") == ("key", None)
    assert parse_order("random:42") == ("random", 42)
    assert parse_order("random:0x10") == ("random", 16)
    for bad in ("random:", "random:abc", "shuffle", "", "key:1"):
        with pytest.raises(ValueError):
            parse_order(bad)


def test_spec_validation():
    ok = ReshardSpec("a", "", "b", "key", target_shard_bytes=100)
    assert ok.min_shard_bytes == 1
    with pytest.raises(ValueError):
        ReshardSpec("a", "", "b", "key", target_shard_bytes=100, min_shard_bytes=101)
    with pytest.raises(ValueError):
        ReshardSpec("a", "", "b", "key", target_shard_bytes=100, min_shard_bytes=0)
    with pytest.raises(ValueError):
        ReshardSpec("a", "", "b", "nope", target_shard_bytes=100)
    with pytest.raises(ValueError):
        ReshardSpec("a", "", "b", "key", target_shard_bytes=100, template="flat.tar")


def test_job_id_depends_on_parameters():
    a = ReshardSpec("src", "", "dst", "key", target_shard_bytes=100)
    b = ReshardSpec("src", "", "dst", "key", target_shard_bytes=200)
    assert a.job_id == ReshardSpec("src", "", "dst", "key", target_shard_bytes=100).job_id
    assert a.job_id != b.job_id
    assert a.job_id in a.manifest_name


# -- planning -------------------------------------------------------------


def test_plan_packs_greedily_hand_trace():
    # Ten 100-byte records at a 300-byte target: 3 + 3 + 3 + 1.
    index = make_index([100] * 10)
    spec = ReshardSpec("s", "", "d", "key", target_shard_bytes=300)
    plan = plan_reshard(index, spec)
    assert [len(o.entries) for o in plan.outputs] == [3, 3, 3, 1]
    assert [o.name for o in plan.outputs] == [
        "shard-000000.tar",
        "shard-000001.tar",
        "shard-000002.tar",
        "shard-000003.tar",
    ]
    # Key order: concatenated outputs are the sorted keys.
    flat = [e.key for o in plan.outputs for e in o.entries]
    assert flat == sorted(e.key for e in index)
    assert plan.record_count == 10


def test_plan_random_order_matches_reference_permutation():
    index = make_index([10] * 37)
    spec = ReshardSpec("s", "", "d", "random:99", target_shard_bytes=55)
    plan = plan_reshard(index, spec)
    flat = [e.key for o in plan.outputs for e in o.entries]
    assert flat == [e.key for e in reference_permuted(index, 99)]
    # And the packing of that order matches the reference packer.
    recs = [Record(key=e.key, components={"bin": b"x" * e.payload_bytes}) for e in index]
    expect = [[r.key for r in s] for s in greedy_pack(reference_permuted(recs, 99), 55)]
    assert [[e.key for e in o.entries] for o in plan.outputs] == expect


def test_plan_oversize_record_lands_alone():
    index = make_index([50, 1000, 50])
    spec = ReshardSpec("s", "", "d", "key", target_shard_bytes=300)
    plan = plan_reshard(index, spec)
    assert [[e.payload_bytes for e in o.entries] for o in plan.outputs] == [
        [50],
        [1000],
        [50],
    ]


def test_plan_tail_may_undercut_min_bytes():
    # min_shard_bytes is advisory for the tail: no error, no rebalancing.
    index = make_index([100] * 4)
    spec = ReshardSpec(
        "s", "", "d", "key", target_shard_bytes=300, min_shard_bytes=250
    )
    plan = plan_reshard(index, spec)
    assert [o.payload_bytes for o in plan.outputs] == [300, 100]


def test_plan_empty_index_raises():
    spec = ReshardSpec("s", "", "d", "key", target_shard_bytes=300)
    with pytest.raises(ReshardError):
        plan_reshard([], spec)


# -- indexing -------------------------------------------------------------


def test_index_one_shard_spans_reconstruct_records():
    records = build_corpus(3, 12, key_prefix="r")
    data = shard_bytes(records)
    entries = index_one_shard("src.tar", io.BytesIO(data))
    assert [e.key for e in entries] == [r.key for r in records]
    last_end = 0
    for entry, rec in zip(entries, records):
        assert entry.payload_bytes == rec.payload_bytes
        assert entry.extensions == tuple(rec.components)
        assert entry.span_start == last_end  # spans tile the data region
        last_end = entry.span_end
        got = records_from_span(data[entry.span_start : entry.span_end])
        assert len(got) == 1
        assert got[0].key == rec.key
        assert got[0].components == rec.components
    assert last_end == len(data) - len(TRAILER)


def test_records_from_span_multiple_records():
    records = build_corpus(8, 3, key_prefix="m")
    data = shard_bytes(records)
    got = records_from_span(data[: len(data) - len(TRAILER)])
    assert [r.key for r in got] == [r.key for r in records]


def test_build_index_duplicate_key_strict_and_permissive():
    shared = Record(key="dup", components={"bin": b"first"})
    shards = {
        "a.tar": shard_bytes([shared, Record(key="only-a", components={"bin": b"A"})]),
        "b.tar": shard_bytes([Record(key="dup", components={"bin": b"second!"})]),
        "c.tar": shard_bytes([Record(key="dup", components={"bin": b"third!!!"})]),
    }
    opener = bytes_opener(shards)
    with pytest.raises(DuplicateKeyError) as err:
        build_record_index(opener, list(shards))
    assert "a.tar" in str(err.value) and "b.tar" in str(err.value)

    index = build_record_index(opener, list(shards), strict=False)
    by_key = {e.key: e for e in index}
    assert set(by_key) == {"dup", "dup#2", "dup#3", "only-a"}
    assert by_key["dup"].shard_name == "a.tar"
    assert by_key["dup#2"].shard_name == "b.tar"
    assert by_key["dup#3"].shard_name == "c.tar"
    assert by_key["dup#2"].source_key == "dup"


# -- end to end against a live store --------------------------------------


def fetch_all_records(client, bucket: str, names: List[str]) -> List[Record]:
    out: List[Record] = []
    for name in sorted(names):
        out.extend(read_shard(io.BytesIO(client.get(bucket, name))))
    return out


def run_and_check(cluster, order: str, target: int) -> None:
    client = cluster.client()
    names = seed_bucket(client, "src", seed=11, shards=6, records_per_shard=15)
    client.create_bucket("dst")
    spec = ReshardSpec("src", "", "dst", order, target_shard_bytes=target)

    source = fetch_all_records(client, "src", names)
    kind, seed = parse_order(order)
    ordered = (
        sorted(source, key=lambda r: r.key)
        if kind == "key"
        else reference_permuted(source, seed)
    )
    expect = greedy_pack(ordered, target)

    stats = reshard(client, spec)
    try:
        listed = [n for n, _ in client.list("dst") if n != spec.manifest_name]
        assert sorted(listed) == sorted(spec.template % i for i in range(len(expect)))
        assert len(stats) == len(expect)
        for i, (stat, recs) in enumerate(zip(stats, expect)):
            got = list(read_shard(io.BytesIO(client.get("dst", stat.name))))
            assert stat.name == spec.template % i
            assert [r.key for r in got] == [r.key for r in recs]
            for g, r in zip(got, recs):
                assert g.components == r.components  # byte-identical payloads
            assert stat.record_count == len(recs)
            assert stat.payload_bytes == sum(r.payload_bytes for r in recs)
        # Conservation: nothing lost, nothing invented.
        assert sum(s.record_count for s in stats) == len(source)
        assert sum(s.payload_bytes for s in stats) == sum(
            r.payload_bytes for r in source
        )
    finally:
        client.close()


def test_reshard_key_order_matches_reference(cluster):
    run_and_check(cluster, "key", target=6000)


def test_reshard_random_order_matches_reference(cluster):
    run_and_check(cluster, "random:7", target=6000)


def test_reshard_resume_and_manifest(cluster):
    client = cluster.client()
    seed_bucket(client, "src", seed=4, shards=3, records_per_shard=8)
    client.create_bucket("dst")
    spec = ReshardSpec("src", "", "dst", "key", target_shard_bytes=4000)

    from shardstore.reshard import build_record_index, cluster_shard_opener

    names = list_source_shards(client, "src", "")
    index = build_record_index(cluster_shard_opener(client, "src"), names)
    plan = plan_reshard(index, spec)
    assert len(plan.outputs) >= 2

    # Pre-mark the first output as done: execution must skip it.
    first = plan.outputs[0].name
    _store_manifest(client, spec, len(plan.outputs), [first])
    stats = execute_reshard(client, plan)
    listed = {n for n, _ in client.list("dst")}
    assert first not in listed  # skipped, so never uploaded
    assert stats[0].serialized_bytes == 0  # reconstructed from the plan
    assert stats[0].record_count == len(plan.outputs[0].entries)
    assert all(s.serialized_bytes > 0 for s in stats[1:])

    # A full re-run skips everything.
    rerun = execute_reshard(client, plan)
    assert all(s.serialized_bytes == 0 for s in rerun)
    assert [s.record_count for s in rerun] == [len(o.entries) for o in plan.outputs]

    manifest = json.loads(client.get("dst", spec.manifest_name))
    assert manifest["spec"] == spec.to_dict()
    assert manifest["planned"] == len(plan.outputs)
    assert sorted(manifest["completed"]) == sorted(o.name for o in plan.outputs)
    client.close()


def test_reshard_manifest_from_other_job_raises(cluster):
    client = cluster.client()
    seed_bucket(client, "src", seed=5, shards=2, records_per_shard=5)
    client.create_bucket("dst")
    spec = ReshardSpec("src", "", "dst", "key", target_shard_bytes=4000)
    other = ReshardSpec("src", "", "dst", "key", target_shard_bytes=9999)
    client.put(
        "dst",
        spec.manifest_name,
        json.dumps({"schema": 1, "spec": other.to_dict(), "completed": []}).encode(),
    )
    with pytest.raises(ReshardError, match="different job"):
        reshard(client, spec)
    client.close()


def test_reshard_duplicate_keys_across_shards(cluster):
    client = cluster.client()
    client.create_bucket("src")
    client.create_bucket("dst")
    client.put(
        "src", "a.tar", shard_bytes([
            Record(key="dup", components={"bin": b"from-a"}),
            Record(key="solo", components={"bin": b"S"}),
        ])
    )
    client.put(
        "src", "b.tar", shard_bytes([Record(key="dup", components={"bin": b"from-b!"})])
    )
    spec = ReshardSpec("src", "", "dst", "key", target_shard_bytes=10_000)
    with pytest.raises(DuplicateKeyError):
        reshard(client, spec)

    got = {}
    for stat in reshard(client, spec, strict=False):
        for rec in read_shard(io.BytesIO(client.get("dst", stat.name))):
            got[rec.key] = rec.components
    assert set(got) == {"dup", "dup#2", "solo"}
    assert got["dup"] == {"bin": b"from-a"}
    assert got["dup#2"] == {"bin": b"from-b!"}
    client.close()


def test_reshard_empty_source_raises(cluster):
    client = cluster.client()
    client.create_bucket("src")
    client.create_bucket("dst")
    spec = ReshardSpec("src", "", "dst", "key", target_shard_bytes=100)
    with pytest.raises(ReshardError, match="no source shards"):
        reshard(client, spec)
    client.close()
