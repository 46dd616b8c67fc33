"""HTTP plumbing shared by gateway and target servers.

Both node kinds are plain ``ThreadingHTTPServer`` instances speaking
HTTP/1.1 with explicit Content-Length on every response, which keeps
keep-alive connections usable without chunked encoding.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
from http.client import HTTPConnection, HTTPResponse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Dict, Tuple
from urllib.parse import parse_qs, unquote, urlsplit

log = logging.getLogger(__name__)

MAP_VERSION_HEADER = "X-Map-Version"
REPLICA_HEADER = "X-Shardstore-Replica"


class NodeServer(ThreadingHTTPServer):
    """One server per node process; ``node`` is the gateway/target object."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: Tuple[str, int], handler, node):
        super().__init__(address, handler)
        self.node = node
        self._conn_lock = threading.Lock()
        self._open_conns: set = set()

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def get_request(self):
        sock, addr = super().get_request()
        with self._conn_lock:
            self._open_conns.add(sock)
        return sock, addr

    def shutdown_request(self, request) -> None:
        with self._conn_lock:
            self._open_conns.discard(request)
        super().shutdown_request(request)

    def force_close_connections(self) -> None:
        """Tear down live keep-alive sockets (crash simulation)."""
        with self._conn_lock:
            conns = list(self._open_conns)
            self._open_conns.clear()
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass

    def handle_error(self, request, client_address) -> None:
        # Connection teardown mid-request is routine here (crash tests,
        # clients abandoning reads); keep it out of stderr.
        log.debug("request error from %s", client_address, exc_info=True)


def start_server(node, handler, host: str = "127.0.0.1", port: int = 0) -> NodeServer:
    server = NodeServer((host, port), handler, node)
    thread = threading.Thread(
        target=server.serve_forever,
        kwargs={"poll_interval": 0.05},
        name=f"shardstore-{node.kind}-{server.endpoint}",
        daemon=True,
    )
    thread.start()
    server._thread = thread
    return server


def stop_server(server: NodeServer) -> None:
    server.shutdown()
    server.server_close()
    server.force_close_connections()


class NodeHandler(BaseHTTPRequestHandler):
    """Base handler: JSON helpers, routing split, quiet logging."""

    protocol_version = "HTTP/1.1"
    server_version = "shardstore"

    @property
    def node(self):
        return self.server.node

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def split_path(self) -> Tuple[list[str], Dict[str, str]]:
        parts = urlsplit(self.path)
        segments = [unquote(s) for s in parts.path.split("/") if s != ""]
        query = {k: v[0] for k, v in parse_qs(parts.query).items()}
        return segments, query

    def request_map_version(self) -> int | None:
        raw = self.headers.get(MAP_VERSION_HEADER)
        return int(raw) if raw is not None else None

    def send_json(
        self, status: int, payload: Dict[str, Any], headers: Dict[str, str] | None = None
    ) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def send_error_json(self, status: int, message: str, **extra: Any) -> None:
        self.send_json(status, {"error": message, **extra})

    def send_empty(self, status: int, headers: Dict[str, str] | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Length", "0")
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()

    def read_json_body(self) -> Dict[str, Any]:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length) if length else b"{}"
        return json.loads(raw or b"{}")


def http_json(
    method: str,
    endpoint: str,
    path: str,
    body: Dict[str, Any] | None = None,
    headers: Dict[str, str] | None = None,
    timeout: float = 10.0,
) -> Tuple[int, Dict[str, Any]]:
    """One-shot JSON request to ``host:port``; returns (status, payload)."""
    host, _, port = endpoint.rpartition(":")
    conn = HTTPConnection(host, int(port), timeout=timeout)
    try:
        payload = json.dumps(body).encode("utf-8") if body is not None else None
        hdrs = dict(headers or {})
        if payload is not None:
            hdrs["Content-Type"] = "application/json"
        conn.request(method, path, body=payload, headers=hdrs)
        resp = conn.getresponse()
        raw = resp.read()
        data: Dict[str, Any] = {}
        if raw:
            try:
                data = json.loads(raw)
            except ValueError:
                data = {"raw": raw.decode("utf-8", "replace")}
        return resp.status, data
    finally:
        conn.close()


def endpoint_alive(endpoint: str, timeout: float = 2.0) -> bool:
    host, _, port = endpoint.rpartition(":")
    try:
        with socket.create_connection((host, int(port)), timeout=timeout):
            return True
    except OSError:
        return False


def stream_response_to(resp: HTTPResponse, write, chunk_size: int = 1 << 20) -> int:
    total = 0
    while True:
        chunk = resp.read(chunk_size)
        if not chunk:
            break
        write(chunk)
        total += len(chunk)
    return total
