"""Shard serialization, checked against the system tar implementation."""

import io
import gzip
import subprocess
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardstore.errors import CorruptShardError
from shardstore.records import Record
from shardstore.rng import SplitMix64, mix64
from shardstore.tario import (
    BLOCK,
    TRAILER,
    iter_entry_spans,
    iter_loose_records,
    list_shard,
    pack_records,
    read_shard,
    shard_name,
    write_shard,
)

from conftest import build_corpus, shard_bytes


def records_equal(a, b):
    return [(r.key, dict(r.components)) for r in a] == [
        (r.key, dict(r.components)) for r in b
    ]


# -- write side against system tar -------------------------------------------


def test_system_tar_extracts_written_shard(tmp_path: Path):
    records = build_corpus(1, 40, max_size=4096)
    shard = tmp_path / "shard.tar"
    with open(shard, "wb") as f:
        stats = write_shard(records, f, name="shard.tar")
    assert stats.serialized_bytes == shard.stat().st_size
    assert stats.serialized_bytes % BLOCK == 0

    out = tmp_path / "out"
    out.mkdir()
    subprocess.run(["tar", "-xf", str(shard), "-C", str(out)], check=True)
    for record in records:
        for ext, data in record.components.items():
            path = out / (f"{record.key}.{ext}" if ext else record.key)
            assert path.read_bytes() == data
    listed = subprocess.run(
        ["tar", "-tf", str(shard)], check=True, capture_output=True, text=True
    ).stdout.splitlines()
    expect = [p for r in records for p in r.entry_paths()]
    assert listed == expect  # exact archive order: records contiguous


def test_system_tar_handles_long_names(tmp_path: Path):
    # >100-byte names force a pax prelude; system tar must still read it.
    key = "deep/" * 30 + "sample-000001"
    records = [Record(key, {"png": b"x" * 700, "cls": b"7"})]
    shard = tmp_path / "long.tar"
    with open(shard, "wb") as f:
        write_shard(records, f)
    out = tmp_path / "out"
    out.mkdir()
    subprocess.run(["tar", "-xf", str(shard), "-C", str(out)], check=True)
    assert (out / (key + ".png")).read_bytes() == b"x" * 700


def test_reads_foreign_system_tar(tmp_path: Path):
    src = tmp_path / "src"
    for i in range(10):
        d = src / f"d{i % 3}"
        d.mkdir(parents=True, exist_ok=True)
        (d / f"rec-{i:04d}.png").write_bytes(bytes([i]) * (100 + i))
        (d / f"rec-{i:04d}.cls").write_bytes(str(i).encode())
    names = sorted(
        str(p.relative_to(src)) for p in src.rglob("*") if p.is_file()
    )
    foreign = tmp_path / "foreign.tar"
    subprocess.run(
        ["tar", "--format=ustar", "-cf", str(foreign), "-C", str(src), *names],
        check=True,
    )
    with open(foreign, "rb") as f:
        records = list(read_shard(f))
    assert len(records) == 10
    for record in records:
        stem = record.key.rsplit("/", 1)[-1]
        i = int(stem.split("-")[1])
        assert record.components["png"] == bytes([i]) * (100 + i)
        assert record.components["cls"] == str(i).encode()


def test_reads_gzipped_shard():
    records = build_corpus(2, 12)
    packed = gzip.compress(shard_bytes(records))
    got = list(read_shard(io.BytesIO(packed)))
    assert records_equal(got, records)


# -- round-trip and structure --------------------------------------------------

_components = st.dictionaries(
    st.sampled_from(["png", "cls", "json", "seg.png", ""]),
    st.binary(min_size=0, max_size=600),
    min_size=1,
    max_size=4,
)


@given(st.lists(_components, min_size=0, max_size=12))
@settings(max_examples=60, deadline=None)
def test_round_trip_property(component_sets):
    records = [
        Record(f"k{i:04d}", comps) for i, comps in enumerate(component_sets)
    ]
    data = shard_bytes(records)
    assert len(data) % BLOCK == 0
    got = list(read_shard(io.BytesIO(data)))
    assert records_equal(got, records)


def test_empty_shard_is_just_a_trailer():
    data = shard_bytes([])
    assert data == TRAILER
    assert list(read_shard(io.BytesIO(data))) == []


def test_components_contiguous_in_archive():
    records = build_corpus(5, 20)
    entries = list(list_shard(io.BytesIO(shard_bytes(records))))
    expect = [p for r in records for p in r.entry_paths()]
    assert [e.path for e in entries] == expect
    offsets = [e.offset for e in entries]
    assert offsets == sorted(offsets)
    assert all(o % BLOCK == 0 for o in offsets)


def test_write_rejects_invalid_record():
    from shardstore.errors import RecordFormatError

    sink = io.BytesIO()
    with pytest.raises(RecordFormatError):
        write_shard([Record("", {"png": b"x"})], sink)
    assert sink.getvalue() == b""  # nothing written for the bad record


def test_corrupt_input_raises():
    with pytest.raises(CorruptShardError):
        list(read_shard(io.BytesIO(b"this is not a tar archive, not even close")))


def test_entry_spans_support_ranged_reconstruction():
    """A span's bytes plus a trailer parse as a one-record mini shard."""
    records = build_corpus(3, 15, min_components=2, max_components=3)
    data = shard_bytes(records)
    spans = list(iter_entry_spans(io.BytesIO(data)))
    for span, (key, ext, payload) in zip(
        spans,
        [
            (r.key, ext, body)
            for r in records
            for ext, body in r.components.items()
        ],
    ):
        fragment = data[span.offset : span.end_offset] + TRAILER
        (got,) = read_shard(io.BytesIO(fragment))
        assert got.key == key
        assert got.components == {ext: payload}


def test_entry_spans_cover_pax_preludes():
    # Long names add a pax prelude entry; the span must start there so a
    # ranged read of [offset, end_offset) still parses standalone.
    key = "nested/" * 20 + "rec-000001"
    records = [
        Record("short", {"png": b"a" * 100}),
        Record(key, {"png": b"b" * 257, "cls": b"9"}),
    ]
    data = shard_bytes(records)
    spans = list(iter_entry_spans(io.BytesIO(data)))
    assert len(spans) == 3
    long_span = spans[1]
    assert long_span.data_offset - long_span.offset > BLOCK  # prelude present
    fragment = data[long_span.offset : long_span.end_offset] + TRAILER
    (got,) = read_shard(io.BytesIO(fragment))
    assert got.key == key and got.components == {"png": b"b" * 257}
    # Adjacent spans tile the archive exactly up to the trailer.
    assert spans[0].offset == 0
    assert all(a.end_offset == b.offset for a, b in zip(spans, spans[1:]))
    assert spans[-1].end_offset == len(data) - len(TRAILER)


def test_entry_spans_on_unseekable_stream():
    records = build_corpus(4, 10)
    data = shard_bytes(records)

    class Pipe(io.RawIOBase):
        def __init__(self, blob):
            self._buf = io.BytesIO(blob)

        def readable(self):
            return True

        def seekable(self):
            return False

        def readinto(self, b):
            chunk = self._buf.read(len(b))
            b[: len(chunk)] = chunk
            return len(chunk)

    seekable = list(iter_entry_spans(io.BytesIO(data)))
    streamed = list(iter_entry_spans(io.BufferedReader(Pipe(data))))
    assert seekable == streamed


def test_shard_name():
    assert shard_name("train", 7) == "train-000007.tar"


# -- packing --------------------------------------------------------------------


def collect_packed(records, target, template="p-%06d.tar"):
    shards = {}

    def emit(name, spool):
        shards[name] = spool.read()

    stats = pack_records(records, target, emit, template=template)
    return stats, shards


def test_pack_hand_traced_example():
    # 10 records x 100 payload bytes at target 300 -> 3, 3, 3, 1.
    records = [Record(f"r{i}", {"bin": bytes([i]) * 100}) for i in range(10)]
    stats, shards = collect_packed(records, 300)
    assert [s.record_count for s in stats] == [3, 3, 3, 1]
    assert [s.payload_bytes for s in stats] == [300, 300, 300, 100]
    assert sorted(shards) == [f"p-{i:06d}.tar" for i in range(4)]
    # Order is preserved across the shard sequence.
    keys = [
        r.key
        for i in range(4)
        for r in read_shard(io.BytesIO(shards[f"p-{i:06d}.tar"]))
    ]
    assert keys == [f"r{i}" for i in range(10)]


def test_pack_oversize_record_lands_whole():
    records = [
        Record("small", {"b": b"x" * 10}),
        Record("huge", {"b": b"y" * 5000}),  # alone exceeds target
        Record("tail", {"b": b"z" * 10}),
    ]
    stats, shards = collect_packed(records, 100)
    assert [s.record_count for s in stats] == [1, 1, 1]
    middle = list(read_shard(io.BytesIO(shards["p-000001.tar"])))
    assert middle[0].key == "huge" and len(middle[0].components["b"]) == 5000


def test_pack_empty_stream():
    stats, shards = collect_packed([], 100)
    assert stats == [] and shards == {}


def test_iter_loose_records_groups_sorted(tmp_path: Path):
    root = tmp_path / "loose"
    (root / "sub").mkdir(parents=True)
    (root / "b.png").write_bytes(b"B")
    (root / "b.cls").write_bytes(b"8")
    (root / "a.png").write_bytes(b"A")
    (root / "sub" / "c.png").write_bytes(b"C")
    records = list(iter_loose_records(root))
    assert [r.key for r in records] == ["a", "b", "sub/c"]
    assert records[1].components == {"cls": b"8", "png": b"B"}
