"""Gateway: stateless request router plus cluster administration.

The gateway never carries object payload.  Every data-plane request is
answered with a 307 redirect to the target that rendezvous placement
selects, and the response always exposes the gateway's current map
version so clients can detect membership changes.  Administrative
operations (join, remove, rebalance) mutate the cluster map under a
single lock and push the new version to every node.
"""

from __future__ import annotations

import base64
import binascii
import logging
import threading
from typing import Dict, List, Optional, Tuple
from urllib.parse import quote

from ..errors import ShardstoreError
from .cmap import (
    BucketPolicy,
    ClusterMap,
    ObjectRef,
    TargetInfo,
    replica_set,
)
from .httpd import MAP_VERSION_HEADER, REPLICA_HEADER, NodeHandler, http_json
from .target import OpError, validate_bucket_name, validate_object_name

log = logging.getLogger(__name__)

DEFAULT_PAGE_SIZE = 1000
MAX_PAGE_SIZE = 10000


def encode_list_token(name: str) -> str:
    return base64.urlsafe_b64encode(name.encode("utf-8")).decode("ascii")


def decode_list_token(token: str) -> str:
    try:
        return base64.urlsafe_b64decode(token.encode("ascii")).decode("utf-8")
    except (binascii.Error, UnicodeError, ValueError) as exc:
        raise OpError(400, f"malformed continuation token {token!r}") from exc


class GatewayNode:
    """Routing state for one gateway process."""

    kind = "gateway"

    def __init__(self, node_id: str, cmap: ClusterMap):
        self.node_id = node_id
        self._map = cmap
        self._map_lock = threading.Lock()
        self._admin_lock = threading.Lock()
        self._bucket_cache: Dict[str, BucketPolicy] = {}
        self._bucket_cache_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self.redirects: Dict[str, int] = {"GET": 0, "PUT": 0, "DELETE": 0}
        self.payload_bytes_proxied = 0

    # -- cluster map ---------------------------------------------------

    @property
    def cluster_map(self) -> ClusterMap:
        with self._map_lock:
            return self._map

    def adopt_map(self, new_map: ClusterMap) -> int:
        with self._map_lock:
            if new_map.version > self._map.version:
                self._map = new_map
            return self._map.version

    def count_redirect(self, method: str) -> None:
        with self._counter_lock:
            self.redirects[method] = self.redirects.get(method, 0) + 1

    # -- bucket knowledge ------------------------------------------------

    def cache_bucket(self, name: str, policy: BucketPolicy) -> None:
        with self._bucket_cache_lock:
            self._bucket_cache[name] = policy

    def bucket_policy(self, name: str) -> BucketPolicy:
        """Resolve a bucket's policy, asking a target on cache miss.

        Misses are re-checked every time: a bucket created through another
        gateway must become routable here without any invalidation step.
        """
        with self._bucket_cache_lock:
            cached = self._bucket_cache.get(name)
        if cached is not None:
            return cached
        cmap = self.cluster_map
        if not cmap.targets:
            raise OpError(503, "no storage targets in cluster map")
        last_error: Optional[str] = None
        for target in cmap.targets:
            try:
                status, payload = http_json(
                    "GET", target.endpoint, f"/v1/buckets/{name}", timeout=5.0
                )
            except OSError as exc:
                last_error = str(exc)
                continue
            if status == 200:
                policy = BucketPolicy.from_dict(payload)
                self.cache_bucket(name, policy)
                return policy
            if status == 404:
                raise OpError(404, f"unknown bucket {name!r}")
            last_error = f"HTTP {status}"
        raise OpError(503, f"no target answered bucket lookup: {last_error}")

    # -- routing ---------------------------------------------------------

    def route(self, obj: ObjectRef) -> TargetInfo:
        validate_bucket_name(obj.bucket)
        validate_object_name(obj.name)
        policy = self.bucket_policy(obj.bucket)
        cmap = self.cluster_map
        if not cmap.targets:
            raise OpError(503, "no storage targets in cluster map")
        return replica_set(cmap, obj, policy)[0]

    # -- bucket creation ---------------------------------------------------

    def create_bucket(self, name: str, policy: BucketPolicy) -> None:
        validate_bucket_name(name)
        cmap = self.cluster_map
        if not cmap.targets:
            raise OpError(503, "no storage targets in cluster map")
        if policy.mirror_count > len(cmap.targets):
            raise OpError(
                400,
                f"mirror={policy.mirror_count} exceeds cluster size "
                f"{len(cmap.targets)}",
            )
        for target in cmap.targets:
            status, payload = http_json(
                "PUT",
                target.endpoint,
                f"/v1/buckets/{name}",
                body=policy.to_dict(),
            )
            if status == 409:
                raise OpError(409, str(payload.get("error", "bucket exists")))
            if status != 200:
                raise OpError(
                    503, f"bucket create on {target.id} failed: HTTP {status}"
                )
        self.cache_bucket(name, policy)

    # -- listing ---------------------------------------------------------

    def list_bucket(
        self, bucket: str, prefix: str, page_size: int, token: Optional[str]
    ) -> Dict[str, object]:
        self.bucket_policy(bucket)  # 404 for unknown buckets
        after = decode_list_token(token) if token else None
        merged: Dict[str, int] = {}
        for target in self.cluster_map.targets:
            status, payload = http_json(
                "GET",
                target.endpoint,
                f"/v1/internal/list?bucket={quote(bucket, safe='')}"
                f"&prefix={quote(prefix, safe='')}",
            )
            if status != 200:
                raise OpError(503, f"list on {target.id} failed: HTTP {status}")
            for item in payload["items"]:
                # Mirrored copies collapse to one entry per name.
                merged[str(item["name"])] = int(item["size"])
        names = sorted(merged)
        if after is not None:
            names = [n for n in names if n > after]
        page = names[:page_size]
        next_token = (
            encode_list_token(page[-1]) if len(names) > page_size else None
        )
        return {
            "items": [{"name": n, "size": merged[n]} for n in page],
            "next_token": next_token,
        }

    # -- administration ----------------------------------------------------

    def _push_map(self, cmap: ClusterMap) -> None:
        """Install ``cmap`` locally, then push it to every other node."""
        self.adopt_map(cmap)
        body = cmap.to_dict()
        for target in cmap.targets:
            try:
                http_json("PUT", target.endpoint, "/v1/cluster/map", body=body)
            except OSError:
                log.warning("map push to target %s failed", target.id)
        for gw in cmap.gateways:
            try:
                http_json("PUT", gw, "/v1/cluster/map", body=body)
            except OSError:
                log.warning("map push to gateway %s failed", gw)

    def _bucket_registry(self, cmap: ClusterMap) -> Dict[str, BucketPolicy]:
        for target in cmap.targets:
            try:
                status, payload = http_json(
                    "GET", target.endpoint, "/v1/internal/buckets"
                )
            except OSError:
                continue
            if status == 200:
                return {
                    name: BucketPolicy.from_dict(d)
                    for name, d in payload["buckets"].items()
                }
        return {}

    def admin_join(self, info: TargetInfo) -> int:
        with self._admin_lock:
            cmap = self.cluster_map
            try:
                new_map = cmap.with_target(info)
            except ShardstoreError as exc:
                raise OpError(409, str(exc)) from exc
            # Seed the newcomer with the bucket registry before it can
            # receive traffic, then announce it to the cluster.
            for name, policy in self._bucket_registry(cmap).items():
                status, _ = http_json(
                    "PUT",
                    info.endpoint,
                    f"/v1/buckets/{name}",
                    body=policy.to_dict(),
                )
                if status not in (200, 409):
                    raise OpError(
                        503, f"bucket seed on {info.id} failed: HTTP {status}"
                    )
            self._push_map(new_map)
            return new_map.version

    def admin_remove(self, target_id: str) -> int:
        """Take a target out of the map, draining it first if reachable.

        Draining moves the leaving target's objects onto their new
        replica sets, so removing a live target loses no data even with
        mirroring disabled.  A dead target cannot be drained; its objects
        survive only where mirrors exist.
        """
        with self._admin_lock:
            cmap = self.cluster_map
            if len(cmap.targets) <= 1:
                raise OpError(409, "refusing to remove the last storage target")
            try:
                leaving = cmap.target(target_id)
                new_map = cmap.without_target(target_id)
            except KeyError:
                raise OpError(404, f"unknown target {target_id!r}")
            self._push_map(new_map)
            extra = self._inventory_one(leaving)
            if extra:
                self._converge(new_map, extra_holders=extra)
            return new_map.version

    def admin_rebalance(self) -> Dict[str, int]:
        """Move objects until every replica set matches the current map.

        Bytes flow target to target over the internal fetch endpoint; the
        gateway only issues control requests.  Returns the number of
        objects that had at least one copy created somewhere new.
        """
        with self._admin_lock:
            return self._converge(self.cluster_map)

    def _inventory_one(
        self, target: TargetInfo
    ) -> Dict[Tuple[str, str], List[Tuple[str, str]]]:
        """Holder entries for one target, empty if it cannot be reached."""
        try:
            status, payload = http_json("GET", target.endpoint, "/v1/internal/list")
        except OSError:
            return {}
        if status != 200:
            return {}
        out: Dict[Tuple[str, str], List[Tuple[str, str]]] = {}
        for item in payload["items"]:
            key = (str(item["bucket"]), str(item["name"]))
            out.setdefault(key, []).append((target.id, target.endpoint))
        return out

    def _converge(
        self,
        cmap: ClusterMap,
        extra_holders: Optional[Dict[Tuple[str, str], List[Tuple[str, str]]]] = None,
    ) -> Dict[str, int]:
        """Copy and prune until holders match placement under ``cmap``.

        ``extra_holders`` contributes source-only copies on nodes outside
        the map (a target being drained).
        """
        policies = self._bucket_registry(cmap)
        holders: Dict[Tuple[str, str], List[Tuple[str, str]]] = {}
        for target in cmap.targets:
            status, payload = http_json("GET", target.endpoint, "/v1/internal/list")
            if status != 200:
                raise OpError(503, f"inventory on {target.id} failed: HTTP {status}")
            for item in payload["items"]:
                key = (str(item["bucket"]), str(item["name"]))
                holders.setdefault(key, []).append((target.id, target.endpoint))
        for key, entries in (extra_holders or {}).items():
            holders.setdefault(key, []).extend(entries)

        in_map = {t.id for t in cmap.targets}
        moved = 0
        deleted = 0
        for (bucket, name), holding in sorted(holders.items()):
            policy = policies.get(bucket)
            if policy is None:
                continue
            obj = ObjectRef(bucket, name)
            desired = [t.id for t in replica_set(cmap, obj, policy)]
            holding_ids = [tid for tid, _ in holding]
            copied_here = False
            for tid in desired:
                if tid in holding_ids:
                    continue
                source_endpoint = holding[0][1]
                status, payload = http_json(
                    "POST",
                    cmap.target(tid).endpoint,
                    "/v1/internal/fetch",
                    body={"bucket": bucket, "name": name, "from": source_endpoint},
                    timeout=60.0,
                )
                if status != 200:
                    raise OpError(
                        503,
                        f"fetch of {bucket}/{name} onto {tid} failed: "
                        f"HTTP {status}",
                    )
                copied_here = True
            for tid, endpoint in holding:
                if tid in desired:
                    continue
                path = (
                    f"/v1/objects/{quote(bucket, safe='')}/{quote(name, safe='/')}"
                )
                try:
                    status, _ = http_json(
                        "DELETE", endpoint, path, headers={REPLICA_HEADER: "1"}
                    )
                except OSError:
                    # A drained node may go away as soon as the copy lands.
                    continue
                if status not in (204, 404) and tid in in_map:
                    raise OpError(
                        503,
                        f"cleanup of {bucket}/{name} on {tid} failed: "
                        f"HTTP {status}",
                    )
                deleted += 1
            if copied_here:
                moved += 1
        return {"moved": moved, "deleted_copies": deleted}

    def metrics(self) -> Dict[str, object]:
        with self._counter_lock:
            redirects = dict(self.redirects)
            proxied = self.payload_bytes_proxied
        return {
            "node": self.node_id,
            "role": "gateway",
            "map_version": self.cluster_map.version,
            "redirects": redirects,
            "payload_bytes_proxied": proxied,
        }


class GatewayHandler(NodeHandler):
    """HTTP surface of a gateway."""

    def _redirect(self, method: str, bucket: str, name: str) -> None:
        node: GatewayNode = self.node
        target = node.route(ObjectRef(bucket, name))
        node.count_redirect(method)
        cmap_version = node.cluster_map.version
        self.send_response(307)
        quoted = quote(name, safe="/")
        self.send_header(
            "Location", f"http://{target.endpoint}/v1/objects/{bucket}/{quoted}"
        )
        self.send_header(MAP_VERSION_HEADER, str(cmap_version))
        self.send_header("Content-Length", "0")
        if method == "PUT":
            # The request body was never read; drop the connection so the
            # unread bytes cannot be misparsed as a new request.
            self.send_header("Connection", "close")
            self.close_connection = True
        self.end_headers()

    def _object_path(self, segments: List[str]) -> Optional[Tuple[str, str]]:
        if segments[:2] == ["v1", "objects"] and len(segments) >= 4:
            return segments[2], "/".join(segments[3:])
        return None

    def do_GET(self) -> None:
        segments, query = self.split_path()
        node: GatewayNode = self.node
        try:
            obj = self._object_path(segments)
            if obj is not None:
                self._redirect("GET", *obj)
            elif (
                segments[:2] == ["v1", "buckets"]
                and len(segments) == 4
                and segments[3] == "list"
            ):
                page_size = min(
                    int(query.get("page_size", DEFAULT_PAGE_SIZE)), MAX_PAGE_SIZE
                )
                if page_size < 1:
                    raise OpError(400, f"bad page_size {page_size}")
                result = node.list_bucket(
                    segments[2],
                    query.get("prefix", ""),
                    page_size,
                    query.get("token"),
                )
                self.send_json(200, result)
            elif segments[:2] == ["v1", "buckets"] and len(segments) == 3:
                self.send_json(200, node.bucket_policy(segments[2]).to_dict())
            elif segments == ["v1", "cluster", "map"]:
                self.send_json(200, node.cluster_map.to_dict())
            elif segments == ["v1", "health"]:
                self.send_json(
                    200, {"status": "ok", "map_version": node.cluster_map.version}
                )
            elif segments == ["v1", "metrics"]:
                self.send_json(200, node.metrics())
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=node.cluster_map.version
            )

    def do_PUT(self) -> None:
        segments, _ = self.split_path()
        node: GatewayNode = self.node
        try:
            obj = self._object_path(segments)
            if obj is not None:
                self._redirect("PUT", *obj)
            elif segments[:2] == ["v1", "buckets"] and len(segments) == 3:
                body = self.read_json_body()
                node.create_bucket(segments[2], BucketPolicy.from_dict(body))
                self.send_json(200, {"ok": True})
            elif segments == ["v1", "cluster", "map"]:
                version = node.adopt_map(ClusterMap.from_dict(self.read_json_body()))
                self.send_json(200, {"map_version": version})
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=node.cluster_map.version
            )

    def do_DELETE(self) -> None:
        segments, _ = self.split_path()
        node: GatewayNode = self.node
        try:
            obj = self._object_path(segments)
            if obj is not None:
                self._redirect("DELETE", *obj)
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=node.cluster_map.version
            )

    def do_POST(self) -> None:
        segments, _ = self.split_path()
        node: GatewayNode = self.node
        try:
            if segments == ["v1", "cluster", "join"]:
                info = TargetInfo.from_dict(self.read_json_body()["target"])
                version = node.admin_join(info)
                self.send_json(200, {"map_version": version})
            elif segments == ["v1", "cluster", "remove"]:
                target_id = str(self.read_json_body()["id"])
                version = node.admin_remove(target_id)
                self.send_json(200, {"map_version": version})
            elif segments == ["v1", "cluster", "rebalance"]:
                self.send_json(200, node.admin_rebalance())
            else:
                self.send_error_json(404, f"no such path {self.path!r}")
        except OpError as exc:
            self.send_error_json(
                exc.status, exc.message, map_version=node.cluster_map.version
            )
