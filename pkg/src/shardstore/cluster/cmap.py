"""Cluster map and rendezvous placement.

Placement is highest-random-weight hashing: each (object, candidate) pair
gets a 64-bit score and candidates are ranked by descending score.  It is
stateless, needs no coordination, and removing a candidate relocates only
the objects that ranked it first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

from ..errors import InsufficientTargetsError, ShardstoreError
from ..hashing import placement_score


@dataclass(frozen=True)
class TargetInfo:
    """One storage server: a stable id, an endpoint, and its disk roots."""

    id: str
    endpoint: str  # host:port
    mountpaths: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ShardstoreError("target id is empty")
        if not self.mountpaths:
            raise ShardstoreError(f"target {self.id} has no mountpaths")
        if len(set(self.mountpaths)) != len(self.mountpaths):
            raise ShardstoreError(f"target {self.id} has duplicate mountpaths")

    @property
    def url(self) -> str:
        return f"http://{self.endpoint}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "endpoint": self.endpoint,
            "mountpaths": list(self.mountpaths),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TargetInfo":
        return cls(
            id=d["id"], endpoint=d["endpoint"], mountpaths=tuple(d["mountpaths"])
        )


@dataclass(frozen=True)
class ClusterMap:
    """Versioned roster of gateways and targets.

    The version strictly increases on every membership change; nodes never
    adopt an older map than the one they hold.
    """

    version: int
    targets: tuple[TargetInfo, ...]
    gateways: tuple[str, ...]  # host:port endpoints

    def __post_init__(self) -> None:
        ids = [t.id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise ShardstoreError(f"duplicate target ids in map: {ids}")

    def target(self, target_id: str) -> TargetInfo:
        for t in self.targets:
            if t.id == target_id:
                return t
        raise KeyError(target_id)

    def with_target(self, info: TargetInfo) -> "ClusterMap":
        return ClusterMap(
            version=self.version + 1,
            targets=self.targets + (info,),
            gateways=self.gateways,
        )

    def without_target(self, target_id: str) -> "ClusterMap":
        remaining = tuple(t for t in self.targets if t.id != target_id)
        if len(remaining) == len(self.targets):
            raise KeyError(target_id)
        return ClusterMap(
            version=self.version + 1, targets=remaining, gateways=self.gateways
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "targets": [t.to_dict() for t in self.targets],
            "gateways": list(self.gateways),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ClusterMap":
        return cls(
            version=int(d["version"]),
            targets=tuple(TargetInfo.from_dict(t) for t in d["targets"]),
            gateways=tuple(d["gateways"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ClusterMap":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BucketPolicy:
    """Per-bucket storage policy; mirror_count = 1 means no mirroring."""

    mirror_count: int = 1

    def __post_init__(self) -> None:
        if self.mirror_count < 1:
            raise ShardstoreError("mirror_count must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return {"mirror": self.mirror_count}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "BucketPolicy":
        return cls(mirror_count=int(d["mirror"]))


@dataclass(frozen=True)
class ObjectRef:
    bucket: str
    name: str

    def __post_init__(self) -> None:
        if not self.bucket or not self.name:
            raise ShardstoreError("bucket and object name must be non-empty")
        if self.name.startswith("/"):
            raise ShardstoreError(f"object name has a leading slash: {self.name!r}")


def hrw_targets(cmap: ClusterMap, obj: ObjectRef, n: int) -> List[TargetInfo]:
    """Top-n targets for an object, by descending rendezvous score.

    Ties (vanishingly rare with a 64-bit hash) break toward the
    lexicographically smaller target id, keeping the ranking total.
    """
    if n < 1 or n > len(cmap.targets):
        raise InsufficientTargetsError(
            f"need {n} targets, map has {len(cmap.targets)}"
        )
    ranked = sorted(
        cmap.targets,
        key=lambda t: (-placement_score(obj.bucket, obj.name, t.id), t.id),
    )
    return ranked[:n]


def hrw_mountpath(target: TargetInfo, obj: ObjectRef) -> str:
    """Second-level rendezvous over one target's mountpaths."""
    return max(
        target.mountpaths,
        key=lambda mp: (placement_score(obj.bucket, obj.name, f"{target.id}|{mp}"), mp),
    )


def replica_set(
    cmap: ClusterMap, obj: ObjectRef, policy: BucketPolicy
) -> List[TargetInfo]:
    n = min(policy.mirror_count, len(cmap.targets))
    return hrw_targets(cmap, obj, n)


def sort_targets(targets: Sequence[TargetInfo]) -> List[TargetInfo]:
    return sorted(targets, key=lambda t: t.id)
