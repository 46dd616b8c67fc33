"""shardstore: record-sequential tar shards, a redirect-based object
store, dataset resharding, a streaming loader pipeline, and a benchmark
harness, all desk-scale and dependency-light."""

from .records import Record, group_into_records, record_key
from .tario import ShardStats, list_shard, read_shard, shard_name, write_shard

__version__ = "0.1.0"

__all__ = [
    "Record",
    "ShardStats",
    "group_into_records",
    "list_shard",
    "read_shard",
    "record_key",
    "shard_name",
    "write_shard",
    "__version__",
]
