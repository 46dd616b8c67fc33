"""Shard serialization: records to and from POSIX tar archives.

Shards are plain ustar archives; a pax extended header is emitted only
when an entry name exceeds the 100-byte ustar field.  Header fields that
would make archives non-reproducible (mtime, uid/gid, uname/gname) are
zeroed.  Writing always emits uncompressed tar; reading transparently
accepts gzip-compressed shards because packing accounting must not depend
on compressed sizes.

Readers are single-pass and forward-only: memory is bounded by the
largest single record, never the shard.
"""

from __future__ import annotations

import io
import tarfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from tempfile import SpooledTemporaryFile
from typing import BinaryIO, Callable, Iterable, Iterator, List, NamedTuple, Tuple

from .errors import CorruptShardError
from .records import Record, group_into_records

BLOCK = 512
TRAILER = b"\0" * (2 * BLOCK)
SPOOL_LIMIT = 64 << 20


@dataclass(frozen=True)
class ShardStats:
    """Accounting for one written shard.

    ``payload_bytes`` sums component lengths; ``serialized_bytes`` is the
    full archive size including headers, padding, and the trailer, and is
    always a multiple of 512.
    """

    name: str
    record_count: int
    payload_bytes: int
    serialized_bytes: int


class ShardEntry(NamedTuple):
    path: str
    size: int
    offset: int


def shard_name(prefix: str, index: int) -> str:
    return f"{prefix}-{index:06d}.tar"


def _entry_header(path: str, size: int) -> bytes:
    info = tarfile.TarInfo(name=path)
    info.size = size
    info.mtime = 0
    info.mode = 0o644
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    return info.tobuf(tarfile.PAX_FORMAT, encoding="utf-8")


def _padding(size: int) -> bytes:
    rem = size % BLOCK
    return b"\0" * (BLOCK - rem) if rem else b""


def write_shard(
    records: Iterable[Record], sink: BinaryIO, *, name: str = ""
) -> ShardStats:
    """Serialize records to ``sink`` as one tar archive.

    Entries appear in record order with each record's components adjacent
    and in their stored order.  Records are validated before any of their
    bytes are written, so an invariant violation never leaves a partially
    written record behind.
    """
    record_count = 0
    payload = 0
    written = 0
    for record in records:
        record.validate()
        for ext, data in record.components.items():
            path = f"{record.key}.{ext}" if ext else record.key
            header = _entry_header(path, len(data))
            sink.write(header)
            sink.write(data)
            pad = _padding(len(data))
            if pad:
                sink.write(pad)
            written += len(header) + len(data) + len(pad)
            payload += len(data)
        record_count += 1
    sink.write(TRAILER)
    written += len(TRAILER)
    return ShardStats(
        name=name,
        record_count=record_count,
        payload_bytes=payload,
        serialized_bytes=written,
    )


def _open_stream(source: BinaryIO) -> tarfile.TarFile:
    # "r|*" keeps the read single-pass and transparently handles .tar.gz.
    try:
        return tarfile.open(fileobj=source, mode="r|*")
    except tarfile.TarError as exc:
        raise CorruptShardError(f"not a readable tar stream: {exc}") from exc


class _PushbackReader(io.RawIOBase):
    """Re-serves peeked head bytes, then reads through to the source."""

    def __init__(self, head: bytes, source: BinaryIO):
        self._head = head
        self._pos = 0
        self._source = source

    def readable(self) -> bool:
        return True

    def seekable(self) -> bool:
        return False

    def readinto(self, b) -> int:
        if self._pos < len(self._head):
            n = min(len(b), len(self._head) - self._pos)
            b[:n] = self._head[self._pos : self._pos + n]
            self._pos += n
            return n
        data = self._source.read(len(b))
        b[: len(data)] = data
        return len(data)


def _check_empty(source: BinaryIO) -> Tuple[BinaryIO, bool]:
    """Peek whether the archive is only an end-of-archive marker.

    tarfile rejects marker-only archives outright, but they are valid
    empty archives (system tar reads them with at most a lone-zero-block
    note), and ``write_shard([])`` produces exactly one.  Returns the
    source with the peeked bytes logically un-consumed.
    """
    seekable = False
    try:
        seekable = source.seekable()
    except (AttributeError, OSError):
        pass
    if seekable:
        pos = source.tell()
        head = source.read(len(TRAILER))
        source.seek(pos)
        stream: BinaryIO = source
    else:
        head = source.read(len(TRAILER))
        stream = io.BufferedReader(_PushbackReader(head, source))
    if head[:2] == b"\x1f\x8b":  # gzip: judge the decompressed head
        try:
            head = zlib.decompressobj(zlib.MAX_WBITS | 16).decompress(
                head, len(TRAILER)
            )
        except zlib.error:
            head = b""
    empty = len(head) >= BLOCK and not head.strip(b"\0")
    return stream, empty


def iter_entries(source: BinaryIO) -> Iterator[Tuple[str, bytes]]:
    """Yield (path, payload) for each regular file in archive order."""
    stream, empty = _check_empty(source)
    if empty:
        return
    tf = _open_stream(stream)
    try:
        while True:
            try:
                member = tf.next()
            except tarfile.TarError as exc:
                raise CorruptShardError(str(exc), offset=tf.offset) from exc
            if member is None:
                break
            if not member.isreg():
                continue
            fobj = tf.extractfile(member)
            try:
                data = fobj.read() if fobj is not None else b""
            except tarfile.TarError as exc:
                raise CorruptShardError(str(exc), offset=member.offset_data) from exc
            yield member.name, data
    finally:
        tf.close()


def read_shard(source: BinaryIO, *, strict: bool = True) -> Iterator[Record]:
    """Stream records out of a shard in archive order."""
    return group_into_records(iter_entries(source), strict=strict)


def list_shard(source: BinaryIO) -> Iterator[ShardEntry]:
    """Stream entry metadata without materializing payloads.

    Offsets point at the entry's first header block (the pax prelude when
    one exists) and are always 512-aligned.  Seekable sources hop between
    headers; pipes fall back to read-and-discard.
    """
    for span in iter_entry_spans(source):
        yield ShardEntry(span.path, span.size, span.offset)


@dataclass(frozen=True)
class EntrySpan:
    """Byte extent of one entry: headers (pax prelude included) start at
    ``offset``, payload at ``data_offset``, padded payload ends at
    ``end_offset``."""

    path: str
    size: int
    offset: int
    data_offset: int
    isfile: bool = True

    @property
    def end_offset(self) -> int:
        rem = self.size % BLOCK
        return self.data_offset + self.size + (BLOCK - rem if rem else 0)


def pack_records(
    records: Iterable[Record],
    target_shard_bytes: int,
    emit: Callable[[str, SpooledTemporaryFile], None],
    *,
    template: str = "shard-%06d.tar",
) -> List[ShardStats]:
    """Greedily pack a record stream into shards of ~``target_shard_bytes``.

    Accounting is in payload bytes.  A shard closes when the next record
    would push it past the target and it already holds at least one
    record, so a single oversize record still lands whole.  ``emit``
    receives each finished shard as a rewound temp file and persists it
    (file rename, upload, ...).
    """
    if target_shard_bytes < 1:
        raise ValueError(f"target_shard_bytes must be >= 1, got {target_shard_bytes}")
    stats: List[ShardStats] = []
    pending: List[Record] = []
    pending_payload = 0

    def flush() -> None:
        nonlocal pending, pending_payload
        if not pending:
            return
        name = template % len(stats)
        with SpooledTemporaryFile(max_size=SPOOL_LIMIT) as spool:
            shard_stats = write_shard(pending, spool, name=name)
            spool.seek(0)
            emit(name, spool)
        stats.append(shard_stats)
        pending, pending_payload = [], 0

    for record in records:
        if pending and pending_payload + record.payload_bytes > target_shard_bytes:
            flush()
        pending.append(record)
        pending_payload += record.payload_bytes
    flush()
    return stats


def iter_loose_records(root: Path) -> Iterator[Record]:
    """Group a directory tree of loose files into records.

    Files are visited in sorted relative-path order, so components of one
    record are adjacent and record order is reproducible.
    """
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file())
    entries = ((p.relative_to(root).as_posix(), p.read_bytes()) for p in files)
    yield from group_into_records(entries)


def iter_entry_spans(source: BinaryIO) -> Iterator[EntrySpan]:
    stream, empty = _check_empty(source)
    if empty:
        return
    seekable = False
    try:
        seekable = stream.seekable()
    except (AttributeError, OSError):
        pass
    if seekable:
        try:
            tf = tarfile.open(fileobj=stream, mode="r:*")
        except tarfile.TarError as exc:
            raise CorruptShardError(f"not a readable tar archive: {exc}") from exc
    else:
        tf = _open_stream(stream)
    # An entry's headers begin where the previous entry's padded data
    # ended, which is the only anchor that covers pax preludes in both
    # seekable and stream mode.
    prev_end = 0
    try:
        while True:
            try:
                member = tf.next()
            except tarfile.TarError as exc:
                raise CorruptShardError(str(exc), offset=tf.offset) from exc
            if member is None:
                break
            span = EntrySpan(
                path=member.name,
                size=member.size,
                offset=prev_end,
                data_offset=member.offset_data,
                isfile=member.isreg(),
            )
            prev_end = span.end_offset
            yield span
    finally:
        tf.close()
