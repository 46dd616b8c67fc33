"""Storage target: owns mountpaths, serves object bodies directly.

Object GET/PUT/DELETE land here after a gateway redirect (or directly,
for mirror retries and target-to-target transfers).  Writes are atomic
(temp file + rename within the mountpath), carry an xxh64 checksum in a
sidecar metadata file, and replicate synchronously to mirror ranks before
acknowledging.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http.client import HTTPConnection
from pathlib import Path
from typing import BinaryIO, Dict, List, Tuple
from urllib.parse import quote

from ..errors import ShardstoreError
from ..hashing import CHECKSUM_ALGO, Checksummer
from .cmap import (
    BucketPolicy,
    ClusterMap,
    ObjectRef,
    TargetInfo,
    hrw_mountpath,
    replica_set,
)
from .httpd import (
    MAP_VERSION_HEADER,
    REPLICA_HEADER,
    NodeHandler,
    http_json,
)

log = logging.getLogger(__name__)

META_DIR = ".shardstore-meta"
CHUNK = 1 << 20


def object_path(obj: ObjectRef) -> str:
    """URL path for an object, with the name percent-escaped."""
    return f"/v1/objects/{quote(obj.bucket, safe='')}/{quote(obj.name, safe='/')}"



class OpError(ShardstoreError):
    """Storage-layer failure mapped straight to an HTTP status."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def validate_bucket_name(bucket: str) -> None:
    if not bucket or "/" in bucket or "\0" in bucket or bucket.startswith("."):
        raise OpError(400, f"invalid bucket name {bucket!r}")


def validate_object_name(name: str) -> None:
    if not name or "\0" in name:
        raise OpError(400, f"invalid object name {name!r}")
    if name.startswith("/") or name.endswith("/"):
        raise OpError(400, f"invalid object name {name!r}")
    parts = name.split("/")
    if any(p in ("", "..") for p in parts):
        raise OpError(400, f"invalid object name {name!r}")


class RateLimiter:
    """Paces read egress to a byte rate, shared by all connections.

    Each chunk reserves the next slice of a single timeline and sleeps
    until its slice ends, so the target never delivers faster than the
    configured rate — even for one large read.  That is the behaviour of
    the spinning disk this emulates.
    """

    def __init__(self, mbps: float):
        self.bytes_per_sec = mbps * 1_000_000.0
        self._lock = threading.Lock()
        self._reserved = time.monotonic()

    def throttle(self, nbytes: int) -> None:
        with self._lock:
            now = time.monotonic()
            start = max(now, self._reserved)
            end = start + nbytes / self.bytes_per_sec
            self._reserved = end
        wait = end - now
        if wait > 0:
            time.sleep(wait)


class MountpathStats:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.bytes_read = 0
        self.bytes_written = 0

    def add_read(self, n: int) -> None:
        with self._lock:
            self.bytes_read += n

    def add_written(self, n: int) -> None:
        with self._lock:
            self.bytes_written += n

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {"bytes_read": self.bytes_read, "bytes_written": self.bytes_written}


@dataclass
class StoredMeta:
    size: int
    checksum: str

    def to_dict(self) -> Dict[str, object]:
        return {"size": self.size, "checksum": f"{CHECKSUM_ALGO}:{self.checksum}"}

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "StoredMeta":
        algo, _, digest = str(d["checksum"]).partition(":")
        if algo != CHECKSUM_ALGO:
            raise OpError(502, f"unknown checksum algorithm {algo!r}")
        return cls(size=int(d["size"]), checksum=digest)


class TargetNode:
    """One storage target process: state, placement checks, peer calls."""

    kind = "target"

    def __init__(
        self,
        info: TargetInfo,
        cmap: ClusterMap,
        *,
        verify_checksums: bool = True,
        read_rate_mbps: float | None = None,
    ):
        self.info = info
        self._map = cmap
        self._map_lock = threading.Lock()
        self.verify_checksums = verify_checksums
        self.rate_limiter = RateLimiter(read_rate_mbps) if read_rate_mbps else None
        self.mountpath_stats: Dict[str, MountpathStats] = {
            mp: MountpathStats() for mp in info.mountpaths
        }
        self._bucket_lock = threading.Lock()
        self._publish_lock = threading.Lock()
        self._buckets: Dict[str, BucketPolicy] = {}
        for mp in info.mountpaths:
            (Path(mp) / META_DIR / "tmp").mkdir(parents=True, exist_ok=True)
        self._registry_path = Path(info.mountpaths[0]) / META_DIR / "buckets.json"
        self._load_buckets()
        self._tmp_seq = 0

    # -- cluster map ---------------------------------------------------

    @property
    def cluster_map(self) -> ClusterMap:
        with self._map_lock:
            return self._map

    def adopt_map(self, new_map: ClusterMap) -> int:
        """Adopt a newer map; older pushes are ignored (monotonicity)."""
        with self._map_lock:
            if new_map.version > self._map.version:
                self._map = new_map
            return self._map.version

    def check_request_version(self, request_version: int | None) -> None:
        if request_version is None:
            return
        current = self.cluster_map.version
        if request_version < current:
            raise OpError(
                409, f"stale map version {request_version}, target holds {current}"
            )
        if request_version > current:
            # The router saw a newer map than we hold; pick it up from a
            # gateway before validating placement against stale state.
            self._refresh_map_from_gateways()

    def _refresh_map_from_gateways(self) -> None:
        for gw in self.cluster_map.gateways:
            try:
                status, payload = http_json("GET", gw, "/v1/cluster/map", timeout=5.0)
            except OSError:
                continue
            if status == 200:
                self.adopt_map(ClusterMap.from_dict(payload))
                return

    # -- buckets -------------------------------------------------------

    def _load_buckets(self) -> None:
        if self._registry_path.exists():
            raw = json.loads(self._registry_path.read_text())
            self._buckets = {
                name: BucketPolicy.from_dict(d) for name, d in raw.items()
            }

    def _save_buckets(self) -> None:
        tmp = self._registry_path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps({n: p.to_dict() for n, p in self._buckets.items()}, sort_keys=True)
        )
        os.replace(tmp, self._registry_path)

    def create_bucket(self, name: str, policy: BucketPolicy) -> None:
        validate_bucket_name(name)
        with self._bucket_lock:
            existing = self._buckets.get(name)
            if existing is not None:
                if existing != policy:
                    raise OpError(
                        409,
                        f"bucket {name!r} exists with mirror={existing.mirror_count}",
                    )
                return
            self._buckets[name] = policy
            self._save_buckets()

    def bucket_policy(self, name: str) -> BucketPolicy:
        with self._bucket_lock:
            policy = self._buckets.get(name)
        if policy is None:
            raise OpError(404, f"unknown bucket {name!r}")
        return policy

    def buckets_snapshot(self) -> Dict[str, Dict[str, int]]:
        with self._bucket_lock:
            return {name: p.to_dict() for name, p in self._buckets.items()}

    # -- object paths --------------------------------------------------

    def _paths(self, obj: ObjectRef) -> Tuple[Path, Path, str]:
        mp = hrw_mountpath(self.info, obj)
        data = Path(mp) / obj.bucket / obj.name
        meta = Path(mp) / META_DIR / "objects" / obj.bucket / (obj.name + ".json")
        return data, meta, mp

    def _tmp_path(self, mp: str) -> Path:
        with self._map_lock:
            self._tmp_seq += 1
            seq = self._tmp_seq
        return Path(mp) / META_DIR / "tmp" / f"put-{os.getpid()}-{seq}"

    # -- object operations ----------------------------------------------

    def put_object(
        self,
        obj: ObjectRef,
        body: BinaryIO,
        length: int,
        *,
        is_replica: bool,
    ) -> StoredMeta:
        validate_bucket_name(obj.bucket)
        validate_object_name(obj.name)
        policy = self.bucket_policy(obj.bucket)
        cmap = self.cluster_map
        replicas = replica_set(cmap, obj, policy)
        if is_replica:
            if self.info.id not in [t.id for t in replicas]:
                raise OpError(
                    409, f"{self.info.id} is not in the replica set for {obj.name}"
                )
        else:
            if replicas[0].id != self.info.id:
                raise OpError(
                    409,
                    f"{self.info.id} is not primary for {obj.name} "
                    f"(map v{cmap.version} says {replicas[0].id})",
                )

        data_path, meta_path, mp = self._paths(obj)
        tmp = self._tmp_path(mp)
        hasher = Checksummer()
        received = 0
        try:
            with open(tmp, "wb") as out:
                while received < length:
                    chunk = body.read(min(CHUNK, length - received))
                    if not chunk:
                        raise OpError(400, "request body shorter than Content-Length")
                    out.write(chunk)
                    hasher.update(chunk)
                    received += len(chunk)
            self.mountpath_stats[mp].add_written(received)
            meta = StoredMeta(size=received, checksum=hasher.hexdigest())

            if not is_replica and len(replicas) > 1:
                for peer in replicas[1:]:
                    self._replicate_to(peer, obj, tmp, meta, cmap.version)

            meta_path.parent.mkdir(parents=True, exist_ok=True)
            data_path.parent.mkdir(parents=True, exist_ok=True)
            meta_tmp = meta_path.with_name(meta_path.name + f".tmp{id(body):x}")
            meta_tmp.write_text(json.dumps(meta.to_dict()))
            # Publish the pair atomically relative to concurrent PUTs so a
            # reader never sees one object's data with another's checksum.
            with self._publish_lock:
                os.replace(meta_tmp, meta_path)
                os.replace(tmp, data_path)
            return meta
        finally:
            if tmp.exists():
                tmp.unlink()

    def _replicate_to(
        self,
        peer: TargetInfo,
        obj: ObjectRef,
        tmp: Path,
        meta: StoredMeta,
        map_version: int,
    ) -> None:
        host, _, port = peer.endpoint.rpartition(":")
        conn = HTTPConnection(host, int(port), timeout=30.0)
        try:
            with open(tmp, "rb") as f:
                conn.request(
                    "PUT",
                    object_path(obj),
                    body=f,
                    headers={
                        "Content-Length": str(meta.size),
                        REPLICA_HEADER: "1",
                        MAP_VERSION_HEADER: str(map_version),
                    },
                )
            resp = conn.getresponse()
            resp.read()
            if resp.status not in (200, 201):
                raise OpError(
                    503,
                    f"replication to {peer.id} failed with HTTP {resp.status}",
                )
        except OSError as exc:
            raise OpError(503, f"replication to {peer.id} failed: {exc}") from exc
        finally:
            conn.close()

    def load_meta(self, obj: ObjectRef) -> Tuple[Path, StoredMeta, str]:
        data_path, meta_path, mp = self._paths(obj)
        if not data_path.is_file() or not meta_path.is_file():
            raise OpError(404, f"object {obj.bucket}/{obj.name} not found")
        meta = StoredMeta.from_dict(json.loads(meta_path.read_text()))
        return data_path, meta, mp

    def verify_object(self, data_path: Path, meta: StoredMeta) -> None:
        hasher = Checksummer()
        with open(data_path, "rb") as f:
            while True:
                chunk = f.read(CHUNK)
                if not chunk:
                    break
                hasher.update(chunk)
        if hasher.hexdigest() != meta.checksum:
            raise OpError(502, f"checksum mismatch on {data_path.name}")

    def delete_object(self, obj: ObjectRef, *, is_replica: bool) -> None:
        validate_bucket_name(obj.bucket)
        validate_object_name(obj.name)
        data_path, meta_path, _ = self._paths(obj)
        if not data_path.is_file():
            raise OpError(404, f"object {obj.bucket}/{obj.name} not found")
        if not is_replica:
            policy = self.bucket_policy(obj.bucket)
            cmap = self.cluster_map
            peers = [
                t for t in replica_set(cmap, obj, policy) if t.id != self.info.id
            ]
            for peer in peers:
                try:
                    http_json(
                        "DELETE",
                        peer.endpoint,
                        object_path(obj),
                        headers={
                            REPLICA_HEADER: "1",
                            MAP_VERSION_HEADER: str(cmap.version),
                        },
                    )
                except OSError:
                    log.warning("replica delete on %s unreachable", peer.id)
        data_path.unlink(missing_ok=True)
        meta_path.unlink(missing_ok=True)

    def list_local(
        self, bucket: str | None, prefix: str = ""
    ) -> List[Dict[str, object]]:
        """All visible objects on this target (across mountpaths)."""
        out: List[Dict[str, object]] = []
        for mp in self.info.mountpaths:
            root = Path(mp)
            buckets = (
                [bucket]
                if bucket is not None
                else sorted(
                    p.name
                    for p in root.iterdir()
                    if p.is_dir() and p.name != META_DIR
                )
            )
            for b in buckets:
                broot = root / b
                if not broot.is_dir():
                    continue
                for path in sorted(broot.rglob("*")):
                    if not path.is_file():
                        continue
                    name = path.relative_to(broot).as_posix()
                    if not name.startswith(prefix):
                        continue
                    out.append(
                        {"bucket": b, "name": name, "size": path.stat().st_size}
                    )
        out.sort(key=lambda d: (d["bucket"], d["name"]))
        return out

    def fetch_from(self, obj: ObjectRef, source_endpoint: str) -> StoredMeta:
        """Pull one object directly from another target (rebalance path)."""
        host, _, port = source_endpoint.rpartition(":")
        conn = HTTPConnection(host, int(port), timeout=30.0)
        try:
            conn.request("GET", object_path(obj))
            resp = conn.getresponse()
            if resp.status != 200:
                resp.read()
                raise OpError(
                    502, f"fetch of {obj.name} from {source_endpoint}: HTTP {resp.status}"
                )
            length = int(resp.headers.get("Content-Length", "0"))
            return self.put_object(obj, resp, length, is_replica=True)
        except OSError as exc:
            raise OpError(502, f"fetch from {source_endpoint} failed: {exc}") from exc
        finally:
            conn.close()

    def metrics(self) -> Dict[str, object]:
        return {
            "node": self.info.id,
            "role": "target",
            "map_version": self.cluster_map.version,
            "mountpaths": {
                mp: stats.snapshot() for mp, stats in self.mountpath_stats.items()
            },
        }


def _parse_range(header: str, size: int) -> Tuple[int, int] | None:
    """Parse a single ``bytes=a-b`` range; returns (start, end_exclusive)."""
    if not header.startswith("bytes="):
        return None
    spec = header[len("bytes=") :]
    if "," in spec:
        raise OpError(400, "multi-range requests are not supported")
    start_s, _, end_s = spec.partition("-")
    try:
        if start_s == "":
            # suffix form: last N bytes
            n = int(end_s)
            return max(0, size - n), size
        start = int(start_s)
        end = int(end_s) + 1 if end_s else size
    except ValueError as exc:
        raise OpError(400, f"malformed Range header {header!r}") from exc
    if start >= size or start < 0 or end <= start:
        raise OpError(416, f"range {header!r} not satisfiable for size {size}")
    return start, min(end, size)


class TargetHandler(NodeHandler):
    """HTTP surface of a storage target."""

    def do_GET(self) -> None:
        segments, query = self.split_path()
        try:
            if segments[:2] == ["v1", "objects"] and len(segments) >= 4:
                self._get_object(segments[2], "/".join(segments[3:]))
            elif segments == ["v1", "health"]:
                self.send_json(
                    200,
                    {"status": "ok", "map_version": self.node.cluster_map.version},
                )
            elif segments == ["v1", "metrics"]:
                self.send_json(200, self.node.metrics())
            elif segments == ["v1", "cluster", "map"]:
                self.send_json(200, self.node.cluster_map.to_dict())
            elif segments == ["v1", "internal", "list"]:
                items = self.node.list_local(
                    query.get("bucket"), query.get("prefix", "")
                )
                self.send_json(200, {"items": items})
            elif segments == ["v1", "internal", "buckets"]:
                self.send_json(200, {"buckets": self.node.buckets_snapshot()})
            elif segments[:2] == ["v1", "buckets"] and len(segments) == 3:
                policy = self.node.bucket_policy(segments[2])
                self.send_json(200, policy.to_dict())
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status,
                exc.message,
                map_version=self.node.cluster_map.version,
            )

    def _get_object(self, bucket: str, name: str) -> None:
        node: TargetNode = self.node
        node.check_request_version(self.request_map_version())
        obj = ObjectRef(bucket, name)
        data_path, meta, mp = node.load_meta(obj)
        range_header = self.headers.get("Range")
        span = _parse_range(range_header, meta.size) if range_header else None
        if node.verify_checksums and span is None:
            node.verify_object(data_path, meta)

        start, end = span if span else (0, meta.size)
        length = end - start
        self.send_response(206 if span else 200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(length))
        self.send_header("X-Checksum", f"{CHECKSUM_ALGO}:{meta.checksum}")
        if span:
            self.send_header("Content-Range", f"bytes {start}-{end - 1}/{meta.size}")
        self.end_headers()

        stats = node.mountpath_stats[mp]
        try:
            with open(data_path, "rb") as f:
                f.seek(start)
                remaining = length
                while remaining > 0:
                    chunk = f.read(min(CHUNK, remaining))
                    if not chunk:
                        break
                    if node.rate_limiter is not None:
                        node.rate_limiter.throttle(len(chunk))
                    self.wfile.write(chunk)
                    stats.add_read(len(chunk))
                    remaining -= len(chunk)
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True

    def do_PUT(self) -> None:
        segments, _ = self.split_path()
        try:
            if segments[:2] == ["v1", "objects"] and len(segments) >= 4:
                node: TargetNode = self.node
                node.check_request_version(self.request_map_version())
                obj = ObjectRef(segments[2], "/".join(segments[3:]))
                raw_length = self.headers.get("Content-Length")
                if raw_length is None:
                    raise OpError(411, "Content-Length required")
                meta = node.put_object(
                    obj,
                    self.rfile,
                    int(raw_length),
                    is_replica=self.headers.get(REPLICA_HEADER) == "1",
                )
                self.send_json(200, meta.to_dict())
            elif segments[:2] == ["v1", "buckets"] and len(segments) == 3:
                body = self.read_json_body()
                self.node.create_bucket(segments[2], BucketPolicy.from_dict(body))
                self.send_json(200, {"ok": True})
            elif segments == ["v1", "cluster", "map"]:
                new_map = ClusterMap.from_dict(self.read_json_body())
                version = self.node.adopt_map(new_map)
                self.send_json(200, {"map_version": version})
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=self.node.cluster_map.version
            )
        except OSError as exc:
            self.send_error_json(507, f"storage failure: {exc}")

    def do_DELETE(self) -> None:
        segments, _ = self.split_path()
        try:
            if segments[:2] == ["v1", "objects"] and len(segments) >= 4:
                node: TargetNode = self.node
                node.check_request_version(self.request_map_version())
                obj = ObjectRef(segments[2], "/".join(segments[3:]))
                node.delete_object(
                    obj, is_replica=self.headers.get(REPLICA_HEADER) == "1"
                )
                self.send_empty(204)
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=self.node.cluster_map.version
            )

    def do_POST(self) -> None:
        segments, _ = self.split_path()
        try:
            if segments == ["v1", "internal", "fetch"]:
                body = self.read_json_body()
                obj = ObjectRef(body["bucket"], body["name"])
                meta = self.node.fetch_from(obj, body["from"])
                self.send_json(200, meta.to_dict())
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=self.node.cluster_map.version
            )
