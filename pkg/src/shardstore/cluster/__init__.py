"""Scale-out object store: placement, gateway, targets, client."""

from .client import StoreClient
from .cmap import (
    BucketPolicy,
    ClusterMap,
    ObjectRef,
    TargetInfo,
    hrw_mountpath,
    hrw_targets,
    replica_set,
)
from .local import LocalCluster, load_cluster_config, serve_node

__all__ = [
    "BucketPolicy",
    "ClusterMap",
    "LocalCluster",
    "ObjectRef",
    "StoreClient",
    "TargetInfo",
    "hrw_mountpath",
    "hrw_targets",
    "load_cluster_config",
    "replica_set",
    "serve_node",
]
