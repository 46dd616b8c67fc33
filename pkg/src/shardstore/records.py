"""Records: indivisible training samples built from same-key files.

A record groups every archive entry whose path shares a key, where the
key is the path with everything from the FIRST dot of the final path
component stripped.  First-dot (rather than last-dot) splitting is a
deliberate choice: it lets layered annotations such as ``x.seg.png`` and
``x.png`` land in one record.  The directory part participates in the
key, so ``a/x.png`` and ``b/x.png`` are different records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Tuple

from .errors import (
    DuplicateComponentError,
    InvalidPathError,
    NonAdjacentKeyError,
    RecordFormatError,
)


@dataclass
class Record:
    """One sample: a key plus extension-tagged component payloads.

    ``components`` maps extension strings (``"png"``, ``"cls"``, possibly
    multi-dotted like ``"seg.png"``, or ``""`` for a bare key file) to raw
    bytes, in insertion order.  A record never spans two shards.
    """

    key: str
    components: Dict[str, bytes] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.key:
            raise RecordFormatError("record key is empty")
        if "\0" in self.key:
            raise RecordFormatError(f"record key contains NUL: {self.key!r}")
        if self.key.startswith("/"):
            raise RecordFormatError(f"record key is absolute: {self.key!r}")
        if not self.components:
            raise RecordFormatError(f"record {self.key!r} has no components")
        for ext in self.components:
            if "/" in ext or "\0" in ext:
                raise RecordFormatError(
                    f"record {self.key!r} has invalid extension {ext!r}"
                )

    @property
    def payload_bytes(self) -> int:
        return sum(len(v) for v in self.components.values())

    def entry_paths(self) -> Iterator[str]:
        for ext in self.components:
            yield component_path(self.key, ext)


def component_path(key: str, ext: str) -> str:
    return f"{key}.{ext}" if ext else key


def split_entry_path(path: str) -> Tuple[str, str]:
    """Split an entry path into (record key, extension).

    The extension is everything after the first dot of the final path
    component; entries without a dot get the empty extension.
    """
    if not path:
        raise InvalidPathError("empty entry path")
    head, sep, base = path.rpartition("/")
    stem, dot, ext = base.partition(".")
    if not stem:
        raise InvalidPathError(f"no record key left after splitting {path!r}")
    return head + sep + stem, ext


def record_key(path: str) -> str:
    """Record key of an entry path (directory part retained)."""
    return split_entry_path(path)[0]


def group_into_records(
    entries: Iterable[Tuple[str, bytes]], *, strict: bool = True
) -> Iterator[Record]:
    """Group consecutive same-key entries into records.

    Records are yielded in first-occurrence order and keep the input order
    of their components.  A key that reappears after other keys were seen
    is an error in strict mode; in permissive mode (for foreign archives)
    it simply starts a new record under the same key.
    """
    current: Record | None = None
    seen: set[str] = set()
    for path, data in entries:
        key, ext = split_entry_path(path)
        if current is not None and key == current.key:
            if ext in current.components:
                raise DuplicateComponentError(
                    f"extension {ext!r} appears twice under key {key!r}"
                )
            current.components[ext] = data
            continue
        if current is not None:
            yield current
        if key in seen and strict:
            raise NonAdjacentKeyError(
                f"key {key!r} reoccurs non-adjacently (strict grouping)"
            )
        seen.add(key)
        current = Record(key, {ext: data})
    if current is not None:
        yield current
