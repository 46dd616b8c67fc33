"""Client for the object store: follows redirects, retries on mirrors.

All data-plane requests start at a gateway and are answered with a 307
redirect; the client then talks to the storage target directly, so
object bytes never pass through the gateway.  PUT uses an early
redirect: only the request line and headers go to the gateway, the body
is first sent to the target the redirect names.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.client import HTTPConnection, HTTPResponse
from typing import BinaryIO, Callable, Dict, Iterator, List, Optional, Tuple
from urllib.parse import quote, urlsplit

from ..errors import ApiError, ObjectNotFoundError, ShardstoreError
from .cmap import BucketPolicy, ClusterMap, ObjectRef, replica_set
from .httpd import MAP_VERSION_HEADER
from .target import OpError, validate_bucket_name, validate_object_name

log = logging.getLogger(__name__)

CHUNK = 1 << 20
PUT_ATTEMPTS = 4


def _object_path(bucket: str, name: str) -> str:
    # Same naming rules the servers enforce, applied before any bytes
    # move: empty URL segments would otherwise be collapsed in transit
    # and silently rename the object.
    try:
        validate_bucket_name(bucket)
        validate_object_name(name)
    except OpError as exc:
        raise ApiError(exc.status, exc.message) from None
    return f"/v1/objects/{quote(bucket, safe='')}/{quote(name, safe='/')}"


def _split_endpoint(endpoint: str) -> Tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host, int(port)


def _raise_for(status: int, payload: Dict[str, object], context: str) -> None:
    message = f"{context}: {payload.get('error', f'HTTP {status}')}"
    if status == 404:
        raise ObjectNotFoundError(message)
    raise ApiError(status, message)


class BodyStream:
    """Sequential reader over one GET response body.

    Closing after a complete read returns the connection to the pool;
    closing early discards it, as the remaining body would poison
    keep-alive reuse.
    """

    def __init__(
        self,
        resp: HTTPResponse,
        done: Callable[[], None],
        discard: Callable[[], None],
    ):
        self._resp = resp
        self._done = done
        self._discard = discard
        self._closed = False
        self.length = int(resp.headers.get("Content-Length", "0"))

    def read(self, size: int = -1) -> bytes:
        return self._resp.read(None if size is None or size < 0 else size)

    def readable(self) -> bool:
        return True

    def seekable(self) -> bool:
        return False

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._resp.isclosed():
            self._done()
        else:
            self._discard()

    def __enter__(self) -> "BodyStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _ConnectionPool:
    """Keep-alive HTTP connections, keyed by endpoint."""

    def __init__(self, timeout: float):
        self.timeout = timeout
        self._lock = threading.Lock()
        self._idle: Dict[str, List[HTTPConnection]] = {}

    def acquire(self, endpoint: str) -> HTTPConnection:
        with self._lock:
            stack = self._idle.get(endpoint)
            if stack:
                return stack.pop()
        host, port = _split_endpoint(endpoint)
        return HTTPConnection(host, port, timeout=self.timeout)

    def release(self, endpoint: str, conn: HTTPConnection) -> None:
        with self._lock:
            self._idle.setdefault(endpoint, []).append(conn)

    def discard(self, conn: HTTPConnection) -> None:
        try:
            conn.close()
        except OSError:
            pass

    def close_all(self) -> None:
        with self._lock:
            idle, self._idle = self._idle, {}
        for conns in idle.values():
            for conn in conns:
                self.discard(conn)


class StoreClient:
    """Talks to one gateway; holds direct connections to targets."""

    def __init__(self, gateway: str, *, timeout: float = 30.0):
        if "://" in gateway:
            gateway = urlsplit(gateway).netloc
        self.gateway = gateway
        self.timeout = timeout
        self._pool = _ConnectionPool(timeout)
        self._policies: Dict[str, BucketPolicy] = {}
        self._lock = threading.Lock()
        self.redirects_followed = 0
        self.mirror_retries = 0
        self.stale_map_retries = 0

    def close(self) -> None:
        self._pool.close_all()

    def __enter__(self) -> "StoreClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _count(self, attr: str) -> None:
        with self._lock:
            setattr(self, attr, getattr(self, attr) + 1)

    # -- pooled request helper ------------------------------------------

    def _request(
        self,
        endpoint: str,
        method: str,
        path: str,
        *,
        body: Optional[bytes] = None,
        headers: Optional[Dict[str, str]] = None,
    ) -> Tuple[HTTPResponse, Callable[[], None], Callable[[], None]]:
        """Issue one request; returns (response, done, discard).

        ``done`` returns the connection to the pool (response fully read),
        ``discard`` drops it.  Retries once on a dead keep-alive socket.
        """
        hdrs = dict(headers or {})
        if body is not None:
            hdrs.setdefault("Content-Length", str(len(body)))
        last_exc: Optional[OSError] = None
        for _ in range(2):
            conn = self._pool.acquire(endpoint)
            try:
                conn.request(method, path, body=body, headers=hdrs)
                resp = conn.getresponse()
            except OSError as exc:
                self._pool.discard(conn)
                last_exc = exc
                continue
            keep = resp.headers.get("Connection", "").lower() != "close"

            def done(conn=conn, resp=resp, keep=keep) -> None:
                if keep and resp.isclosed():
                    self._pool.release(endpoint, conn)
                else:
                    self._pool.discard(conn)

            def discard(conn=conn) -> None:
                self._pool.discard(conn)

            return resp, done, discard
        raise ApiError(503, f"cannot reach {endpoint}: {last_exc}")

    def _json_call(
        self,
        endpoint: str,
        method: str,
        path: str,
        *,
        body: Optional[Dict[str, object]] = None,
        headers: Optional[Dict[str, str]] = None,
        context: str = "request",
    ) -> Dict[str, object]:
        raw = json.dumps(body).encode("utf-8") if body is not None else None
        resp, done, discard = self._request(
            endpoint, method, path, body=raw, headers=headers
        )
        try:
            data = resp.read()
        except OSError as exc:
            discard()
            raise ApiError(503, f"{context}: read failed: {exc}") from exc
        done()
        payload: Dict[str, object] = {}
        if data:
            try:
                payload = json.loads(data)
            except ValueError:
                payload = {"error": data.decode("utf-8", "replace")}
        if resp.status >= 400:
            _raise_for(resp.status, payload, context)
        return payload

    # -- cluster and bucket surface ----------------------------------------

    def cluster_map(self) -> ClusterMap:
        payload = self._json_call(
            self.gateway, "GET", "/v1/cluster/map", context="cluster map"
        )
        return ClusterMap.from_dict(payload)  # type: ignore[arg-type]

    def health(self) -> Dict[str, object]:
        return self._json_call(self.gateway, "GET", "/v1/health", context="health")

    def metrics(self, endpoint: Optional[str] = None) -> Dict[str, object]:
        return self._json_call(
            endpoint or self.gateway, "GET", "/v1/metrics", context="metrics"
        )

    def create_bucket(self, bucket: str, mirror: int = 1) -> None:
        self._json_call(
            self.gateway,
            "PUT",
            f"/v1/buckets/{quote(bucket, safe='')}",
            body={"mirror": mirror},
            context=f"create bucket {bucket!r}",
        )
        with self._lock:
            self._policies[bucket] = BucketPolicy(mirror_count=mirror)

    def bucket_policy(self, bucket: str) -> BucketPolicy:
        with self._lock:
            cached = self._policies.get(bucket)
        if cached is not None:
            return cached
        payload = self._json_call(
            self.gateway,
            "GET",
            f"/v1/buckets/{quote(bucket, safe='')}",
            context=f"bucket {bucket!r}",
        )
        policy = BucketPolicy.from_dict(payload)  # type: ignore[arg-type]
        with self._lock:
            self._policies[bucket] = policy
        return policy

    def list(
        self, bucket: str, prefix: str = "", page_size: int = 1000
    ) -> Iterator[Tuple[str, int]]:
        token: Optional[str] = None
        while True:
            path = (
                f"/v1/buckets/{quote(bucket, safe='')}/list"
                f"?prefix={quote(prefix, safe='')}&page_size={page_size}"
            )
            if token:
                path += f"&token={token}"
            payload = self._json_call(
                self.gateway, "GET", path, context=f"list {bucket!r}"
            )
            for item in payload["items"]:  # type: ignore[index]
                yield str(item["name"]), int(item["size"])
            token = payload.get("next_token")  # type: ignore[assignment]
            if not token:
                return

    # -- redirect handling ---------------------------------------------

    def _redirect_for(
        self, method: str, bucket: str, name: str, *, length: int = 0
    ) -> Tuple[str, str, int]:
        """Ask the gateway where an object lives.

        For PUT only the request line and headers are sent (with the real
        Content-Length, but no body); the gateway answers the redirect
        before any payload moves, and the body goes over the wire exactly
        once, to the target.  Returns (endpoint, path, map_version).
        """
        path = _object_path(bucket, name)
        if method == "PUT":
            host, port = _split_endpoint(self.gateway)
            conn = HTTPConnection(host, port, timeout=self.timeout)
            try:
                conn.putrequest("PUT", path)
                conn.putheader("Content-Length", str(length))
                conn.endheaders()
                resp = conn.getresponse()
                payload = resp.read()
            finally:
                conn.close()
        else:
            resp, done, discard = self._request(self.gateway, method, path)
            try:
                payload = resp.read()
            except OSError as exc:
                discard()
                raise ApiError(503, f"redirect read failed: {exc}") from exc
            done()
        if resp.status != 307:
            data: Dict[str, object] = {}
            if payload:
                try:
                    data = json.loads(payload)
                except ValueError:
                    pass
            _raise_for(resp.status, data, f"{method} {bucket}/{name}")
        location = resp.headers.get("Location", "")
        version = int(resp.headers.get(MAP_VERSION_HEADER, "0"))
        parts = urlsplit(location)
        self._count("redirects_followed")
        return parts.netloc, parts.path, version

    # -- object operations ----------------------------------------------

    def put(self, bucket: str, name: str, data: bytes) -> Dict[str, object]:
        """Store one object; returns the target's size/checksum record."""
        return self._put_with_retry(bucket, name, lambda: data, len(data))

    def put_file(self, bucket: str, name: str, source: BinaryIO) -> Dict[str, object]:
        """Stream a seekable file as one object."""
        source.seek(0, 2)
        length = source.tell()

        def rewound() -> BinaryIO:
            source.seek(0)
            return source

        return self._put_with_retry(bucket, name, rewound, length)

    def _put_with_retry(
        self,
        bucket: str,
        name: str,
        body_provider: Callable[[], object],
        length: int,
    ) -> Dict[str, object]:
        last: Optional[ApiError] = None
        for attempt in range(PUT_ATTEMPTS):
            endpoint, path, version = self._redirect_for(
                "PUT", bucket, name, length=length
            )
            conn = self._pool.acquire(endpoint)
            try:
                conn.request(
                    "PUT",
                    path,
                    body=body_provider(),
                    headers={
                        "Content-Length": str(length),
                        MAP_VERSION_HEADER: str(version),
                    },
                )
                resp = conn.getresponse()
                payload = resp.read()
            except OSError as exc:
                self._pool.discard(conn)
                raise ApiError(503, f"put {bucket}/{name}: {exc}") from exc
            self._pool.release(endpoint, conn)
            if resp.status < 400:
                return json.loads(payload) if payload else {}
            data: Dict[str, object] = {}
            if payload:
                try:
                    data = json.loads(payload)
                except ValueError:
                    pass
            # 409 means the map changed under us; fetch a fresh redirect
            # and try again.
            if resp.status not in (409, 503) or attempt == PUT_ATTEMPTS - 1:
                _raise_for(resp.status, data, f"put {bucket}/{name}")
            last = ApiError(resp.status, str(data.get("error", "")))
            self._count("stale_map_retries")
            time.sleep(0.05 * (attempt + 1))
        raise last  # pragma: no cover

    def get_to(
        self,
        bucket: str,
        name: str,
        write: Callable[[bytes], object],
        *,
        byte_range: Optional[Tuple[int, int]] = None,
    ) -> int:
        """Stream an object (or a byte span of it) into ``write``.

        ``byte_range`` is half-open (start, end).  If the redirect target
        is unreachable, remaining mirrors are tried directly before the
        operation fails.
        """
        headers: Dict[str, str] = {}
        if byte_range is not None:
            start, end = byte_range
            headers["Range"] = f"bytes={start}-{end - 1}"
        dead = ""
        try:
            dead, path, _ = self._redirect_for("GET", bucket, name)
            return self._fetch(dead, path, headers, write, f"{bucket}/{name}")
        except ObjectNotFoundError:
            raise
        except ApiError as primary_exc:
            if primary_exc.status not in (502, 503):
                raise
            # Mirror fallback: compute the replica set ourselves and walk it,
            # skipping the endpoint the redirect already proved unreachable.
            failed = primary_exc
            cmap = self.cluster_map()
            policy = self.bucket_policy(bucket)
            if policy.mirror_count < 2:
                raise
            obj = ObjectRef(bucket, name)
            path = _object_path(bucket, name)
            for target in replica_set(cmap, obj, policy):
                if target.endpoint == dead:
                    continue
                try:
                    self._count("mirror_retries")
                    return self._fetch(
                        target.endpoint, path, headers, write, f"{bucket}/{name}"
                    )
                except ObjectNotFoundError:
                    raise
                except ApiError as exc:
                    failed = exc
            raise failed

    def _fetch(
        self,
        endpoint: str,
        path: str,
        headers: Dict[str, str],
        write: Callable[[bytes], object],
        what: str,
    ) -> int:
        resp, done, discard = self._request(endpoint, "GET", path, headers=headers)
        if resp.status not in (200, 206):
            try:
                payload = json.loads(resp.read() or b"{}")
            except (ValueError, OSError):
                payload = {}
            done()
            _raise_for(resp.status, payload, f"get {what}")
        total = 0
        try:
            while True:
                chunk = resp.read(CHUNK)
                if not chunk:
                    break
                write(chunk)
                total += len(chunk)
        except OSError as exc:
            discard()
            raise ApiError(503, f"get {what}: transfer failed: {exc}") from exc
        done()
        return total

    def get(
        self,
        bucket: str,
        name: str,
        *,
        byte_range: Optional[Tuple[int, int]] = None,
    ) -> bytes:
        parts: List[bytes] = []
        self.get_to(bucket, name, parts.append, byte_range=byte_range)
        return b"".join(parts)

    def open_stream(self, bucket: str, name: str) -> "BodyStream":
        """Open an object for sequential reading without buffering it.

        The returned handle must be closed (or used as a context manager)
        so its connection can be pooled again.  Unreachable redirect
        targets fall back to the remaining mirrors, as in ``get_to``.
        """
        dead = ""
        try:
            dead, path, _ = self._redirect_for("GET", bucket, name)
            return self._open_at(dead, path, f"{bucket}/{name}")
        except ObjectNotFoundError:
            raise
        except ApiError as primary_exc:
            if primary_exc.status not in (502, 503):
                raise
            failed = primary_exc
            cmap = self.cluster_map()
            policy = self.bucket_policy(bucket)
            if policy.mirror_count < 2:
                raise
            obj = ObjectRef(bucket, name)
            path = _object_path(bucket, name)
            for target in replica_set(cmap, obj, policy):
                if target.endpoint == dead:
                    continue
                try:
                    self._count("mirror_retries")
                    return self._open_at(target.endpoint, path, f"{bucket}/{name}")
                except ObjectNotFoundError:
                    raise
                except ApiError as exc:
                    failed = exc
            raise failed

    def _open_at(self, endpoint: str, path: str, what: str) -> "BodyStream":
        resp, done, discard = self._request(endpoint, "GET", path)
        if resp.status != 200:
            try:
                payload = json.loads(resp.read() or b"{}")
            except (ValueError, OSError):
                payload = {}
            done()
            _raise_for(resp.status, payload, f"get {what}")
        return BodyStream(resp, done, discard)

    def delete(self, bucket: str, name: str) -> None:
        endpoint, path, version = self._redirect_for("DELETE", bucket, name)
        resp, done, discard = self._request(
            endpoint,
            "DELETE",
            path,
            headers={MAP_VERSION_HEADER: str(version)},
        )
        try:
            payload = resp.read()
        except OSError as exc:
            discard()
            raise ApiError(503, f"delete {bucket}/{name}: {exc}") from exc
        done()
        if resp.status not in (200, 204):
            data: Dict[str, object] = {}
            if payload:
                try:
                    data = json.loads(payload)
                except ValueError:
                    pass
            _raise_for(resp.status, data, f"delete {bucket}/{name}")

    # -- admin passthrough -----------------------------------------------

    def admin_join(self, info: Dict[str, object]) -> int:
        payload = self._json_call(
            self.gateway,
            "POST",
            "/v1/cluster/join",
            body={"target": info},
            context="join",
        )
        return int(payload["map_version"])  # type: ignore[arg-type]

    def admin_remove(self, target_id: str) -> int:
        payload = self._json_call(
            self.gateway,
            "POST",
            "/v1/cluster/remove",
            body={"id": target_id},
            context="remove",
        )
        return int(payload["map_version"])  # type: ignore[arg-type]

    def admin_rebalance(self) -> Dict[str, int]:
        payload = self._json_call(
            self.gateway, "POST", "/v1/cluster/rebalance", context="rebalance"
        )
        return {k: int(v) for k, v in payload.items()}  # type: ignore[union-attr]
