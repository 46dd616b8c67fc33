"""Run a whole cluster inside one process, or one node in the foreground.

``LocalCluster`` exists for tests and for desk-scale experiments: every
gateway and target is a thread in the current process, bound to an
ephemeral loopback port, with mountpaths under a common root directory.
``serve_node`` is the foreground entry point used by the CLI to run a
single node from a shared cluster config file.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .client import StoreClient
from .cmap import ClusterMap, TargetInfo
from .gateway import GatewayHandler, GatewayNode
from .httpd import NodeServer, stop_server
from .target import TargetHandler, TargetNode

log = logging.getLogger(__name__)

EMPTY_MAP = ClusterMap(version=0, targets=(), gateways=())


def _bind_server(handler, host: str = "127.0.0.1", port: int = 0) -> NodeServer:
    """Bind a server socket now; the node is attached before serving."""
    return NodeServer((host, port), handler, node=None)


def _serve(server: NodeServer, name: str) -> None:
    import threading

    thread = threading.Thread(
        target=server.serve_forever,
        kwargs={"poll_interval": 0.05},
        name=name,
        daemon=True,
    )
    thread.start()
    server._thread = thread


class LocalCluster:
    """In-process gateways and targets sharing one directory tree."""

    def __init__(
        self,
        root: Path,
        *,
        targets: int = 3,
        mountpaths_per_target: int = 1,
        gateways: int = 1,
        verify_checksums: bool = True,
        read_rate_mbps: Optional[float] = None,
    ):
        self.root = Path(root)
        self._servers: List[NodeServer] = []
        self.target_nodes: Dict[str, TargetNode] = {}
        self.target_servers: Dict[str, NodeServer] = {}
        self.gateway_nodes: List[GatewayNode] = []
        self.gateway_endpoints: List[str] = []
        self._verify_checksums = verify_checksums
        self._read_rate_mbps = read_rate_mbps

        target_infos: List[TargetInfo] = []
        pending: List[Tuple[NodeServer, TargetInfo]] = []
        for i in range(targets):
            server = _bind_server(TargetHandler)
            info = self._target_info(f"t{i}", server.endpoint, mountpaths_per_target)
            target_infos.append(info)
            pending.append((server, info))

        gateway_servers = [_bind_server(GatewayHandler) for _ in range(gateways)]
        self.gateway_endpoints = [s.endpoint for s in gateway_servers]

        cmap = ClusterMap(
            version=1,
            targets=tuple(target_infos),
            gateways=tuple(self.gateway_endpoints),
        )
        for server, info in pending:
            node = TargetNode(
                info,
                cmap,
                verify_checksums=verify_checksums,
                read_rate_mbps=read_rate_mbps,
            )
            server.node = node
            _serve(server, f"shardstore-target-{info.id}")
            self._servers.append(server)
            self.target_nodes[info.id] = node
            self.target_servers[info.id] = server
        for i, server in enumerate(gateway_servers):
            node = GatewayNode(f"gw{i}", cmap)
            server.node = node
            _serve(server, f"shardstore-gateway-{i}")
            self._servers.append(server)
            self.gateway_nodes.append(node)

    def _target_info(
        self, target_id: str, endpoint: str, mountpaths: int
    ) -> TargetInfo:
        paths = []
        for j in range(mountpaths):
            mp = self.root / target_id / f"mp{j}"
            mp.mkdir(parents=True, exist_ok=True)
            paths.append(str(mp))
        return TargetInfo(id=target_id, endpoint=endpoint, mountpaths=tuple(paths))

    # -- lifecycle -------------------------------------------------------

    @property
    def gateway(self) -> str:
        return self.gateway_endpoints[0]

    def client(self, *, timeout: float = 30.0) -> StoreClient:
        return StoreClient(self.gateway, timeout=timeout)

    def stop_target(self, target_id: str) -> None:
        """Kill one target's server (the map still lists it)."""
        server = self.target_servers.pop(target_id)
        self._servers.remove(server)
        stop_server(server)

    def start_extra_target(
        self, target_id: str, *, mountpaths: int = 1
    ) -> Dict[str, object]:
        """Boot a fresh target process; the caller joins it via the admin.

        Returns the target description for ``StoreClient.admin_join``.
        """
        server = _bind_server(TargetHandler)
        info = self._target_info(target_id, server.endpoint, mountpaths)
        node = TargetNode(
            info,
            self.gateway_nodes[0].cluster_map,
            verify_checksums=self._verify_checksums,
            read_rate_mbps=self._read_rate_mbps,
        )
        server.node = node
        _serve(server, f"shardstore-target-{target_id}")
        self._servers.append(server)
        self.target_nodes[target_id] = node
        self.target_servers[target_id] = server
        return info.to_dict()

    def stop(self) -> None:
        for server in self._servers:
            stop_server(server)
        self._servers.clear()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def load_cluster_config(path: Path) -> Tuple[ClusterMap, Dict[str, object]]:
    """Read a cluster config file and derive the version-1 map from it.

    The config lists every node up front::

        {
          "gateways": ["127.0.0.1:51080"],
          "targets": [
            {"id": "t0", "endpoint": "127.0.0.1:51081",
             "mountpaths": ["/data/t0"]}
          ]
        }
    """
    raw = json.loads(Path(path).read_text())
    cmap = ClusterMap(
        version=1,
        targets=tuple(TargetInfo.from_dict(t) for t in raw["targets"]),
        gateways=tuple(raw["gateways"]),
    )
    return cmap, raw


def serve_node(
    role: str,
    node_id: str,
    config_path: Path,
    *,
    verify_checksums: bool = True,
    read_rate_mbps: Optional[float] = None,
) -> NodeServer:
    """Start one node from the shared config; returns its running server."""
    cmap, _ = load_cluster_config(config_path)
    if role == "target":
        info = cmap.target(node_id)
        for mp in info.mountpaths:
            Path(mp).mkdir(parents=True, exist_ok=True)
        node = TargetNode(
            info,
            cmap,
            verify_checksums=verify_checksums,
            read_rate_mbps=read_rate_mbps,
        )
        handler = TargetHandler
        endpoint = info.endpoint
    elif role == "gateway":
        index = int(node_id) if node_id.isdigit() else 0
        if index >= len(cmap.gateways):
            raise ValueError(f"gateway index {index} not in config")
        node = GatewayNode(f"gw{index}", cmap)
        handler = GatewayHandler
        endpoint = cmap.gateways[index]
    else:
        raise ValueError(f"unknown role {role!r}")

    host, _, port = endpoint.rpartition(":")
    server = NodeServer((host, int(port)), handler, node)
    _serve(server, f"shardstore-{role}-{node_id}")
    log.info("%s %s serving on %s", role, node_id, server.endpoint)
    return server
