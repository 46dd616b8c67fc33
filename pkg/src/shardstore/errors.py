"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ShardstoreError(Exception):
    """Base class for all shardstore errors."""


class InvalidPathError(ShardstoreError):
    """An entry path cannot be reduced to a record key."""


class RecordFormatError(ShardstoreError):
    """A record violates its structural invariants."""


class DuplicateComponentError(RecordFormatError):
    """The same component extension appeared twice under one record key."""


class NonAdjacentKeyError(RecordFormatError):
    """A record key reoccurred after other records (strict grouping only)."""


class CorruptShardError(ShardstoreError):
    """A shard could not be parsed as a tar archive.

    ``offset`` is the byte offset at which the reader gave up, best effort.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientTargetsError(ShardstoreError):
    """A placement was requested over more targets than the map holds."""


class ApiError(ShardstoreError):
    """An HTTP request to a gateway or target failed."""

    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


class ObjectNotFoundError(ApiError):
    def __init__(self, message: str):
        super().__init__(404, message)


class StaleMapError(ApiError):
    """The node rejected a request routed with an outdated cluster map."""

    def __init__(self, message: str):
        super().__init__(409, message)


class DuplicateKeyError(ShardstoreError):
    """The same record key exists in two source shards (strict mode)."""


class ReshardError(ShardstoreError):
    """A reshard job could not complete; completed shards remain valid."""


class BenchError(ShardstoreError):
    """A benchmark run failed in a way that invalidates its report."""
