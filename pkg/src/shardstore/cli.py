"""One multiplexed command-line tool for the whole stack.

Subcommand groups: ``shard`` (authoring and inspection of tar shards),
``cluster`` (local multi-process cluster lifecycle), object I/O
(``mkbucket``/``put``/``get``/``ls``/``rm``), and the heavier operations
``reshard``, ``bench``, and ``inflate``.

Exit codes are uniform: 0 success, 1 usage error, 2 operational failure.
Endpoint resolution for data commands: ``--endpoint`` flag, then ``--root``
(a local cluster directory), then ``$SHARDSTORE_ENDPOINT``, then the
``endpoint`` key of ``~/.shardstore.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

from .bench import (
    BenchConfig,
    BenchReport,
    emit_report,
    inflate_dataset,
    read_bucket_records,
    read_shard_dir_records,
    run_delivery_bench,
    run_loop_bench,
)
from .cluster.client import StoreClient
from .cluster.httpd import http_json
from .errors import ApiError, ObjectNotFoundError, ShardstoreError
from .loader import ClusterSource
from .records import Record
from .reshard import ReshardSpec, reshard
from .tario import (
    iter_entries,
    iter_loose_records,
    list_shard,
    pack_records,
    read_shard,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

BASE_PORT = 51080
USER_CONFIG = Path.home() / ".shardstore.json"
CLUSTER_CONFIG = "cluster.json"
CLUSTER_LOCK = "cluster.lock"


class UsageError(Exception):
    """Bad flags or arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; route through UsageError for exit 1.
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# -- small shared helpers ------------------------------------------------------

_SIZE_UNITS = {
    "": 1,
    "b": 1,
    "kb": 10**3,
    "mb": 10**6,
    "gb": 10**9,
    "tb": 10**12,
    "kib": 1 << 10,
    "mib": 1 << 20,
    "gib": 1 << 30,
    "tib": 1 << 40,
}


def parse_size(text: str) -> int:
    """Accept plain bytes or binary/decimal suffixes: 4096, 128MiB, 1.5GB."""
    s = text.strip().lower()
    i = len(s)
    while i > 0 and (s[i - 1].isalpha() or s[i - 1].isspace()):
        i -= 1
    number, unit = s[:i].strip(), s[i:].strip()
    if unit not in _SIZE_UNITS or not number:
        raise UsageError(f"unparseable size {text!r}")
    try:
        value = float(number)
    except ValueError:
        raise UsageError(f"unparseable size {text!r}") from None
    result = int(value * _SIZE_UNITS[unit])
    if result < 1:
        raise UsageError(f"size must be positive, got {text!r}")
    return result


def split_object_path(path: str, *, op: str) -> tuple:
    """``bucket/name`` → (bucket, name); the name may itself contain slashes."""
    bucket, sep, name = path.partition("/")
    if not sep or not bucket or not name:
        raise UsageError(f"{op} needs BUCKET/NAME, got {path!r}")
    return bucket, name


def split_bucket_prefix(path: str) -> tuple:
    """``bucket`` or ``bucket/prefix`` → (bucket, prefix)."""
    bucket, _, prefix = path.partition("/")
    if not bucket:
        raise UsageError(f"need BUCKET or BUCKET/PREFIX, got {path!r}")
    return bucket, prefix


def resolve_endpoint(args: argparse.Namespace) -> str:
    if getattr(args, "endpoint", None):
        return args.endpoint
    root = getattr(args, "root", None)
    if root:
        config = Path(root) / CLUSTER_CONFIG
        if not config.exists():
            raise ShardstoreError(f"no cluster config at {config}")
        return json.loads(config.read_text())["gateways"][0]
    env = os.environ.get("SHARDSTORE_ENDPOINT")
    if env:
        return env
    if USER_CONFIG.exists():
        endpoint = json.loads(USER_CONFIG.read_text()).get("endpoint")
        if endpoint:
            return endpoint
    raise ShardstoreError(
        "no endpoint configured: pass --endpoint, set SHARDSTORE_ENDPOINT, "
        f"or put {{\"endpoint\": ...}} in {USER_CONFIG}"
    )


def client_for(args: argparse.Namespace) -> StoreClient:
    return StoreClient(resolve_endpoint(args))


# -- shard subcommands ---------------------------------------------------------


def cmd_shard_create(args: argparse.Namespace) -> int:
    src = Path(args.src)
    if not src.is_dir():
        raise ShardstoreError(f"source directory {src} does not exist")
    template = args.dst
    try:
        distinct = template % 0 != template % 1
    except (TypeError, ValueError):
        distinct = False
    if not distinct:
        raise UsageError(f"--dst needs a %d-style index placeholder, got {template!r}")
    target_size = parse_size(args.target_size)

    def emit(name: str, spool) -> None:
        path = Path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as out:
            while True:
                chunk = spool.read(1 << 20)
                if not chunk:
                    break
                out.write(chunk)

    stats = pack_records(iter_loose_records(src), target_size, emit, template=template)
    for st in stats:
        print(f"{st.name}\trecords={st.record_count}\tpayload={st.payload_bytes}")
    print(f"wrote {len(stats)} shard(s)")
    return EXIT_OK


def cmd_shard_ls(args: argparse.Namespace) -> int:
    rows = []
    with open(args.file, "rb") as f:
        for entry in list_shard(f):
            rows.append({"path": entry.path, "size": entry.size, "offset": entry.offset})
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            print(f"{row['size']:>12}  {row['path']}")
    return EXIT_OK


def cmd_shard_cat(args: argparse.Namespace) -> int:
    with open(args.file, "rb") as f:
        for path, data in iter_entries(f):
            if path == args.entry:
                sys.stdout.buffer.write(data)
                return EXIT_OK
    raise ShardstoreError(f"no entry {args.entry!r} in {args.file}")


def cmd_shard_extract(args: argparse.Namespace) -> int:
    dst = Path(args.dst)
    dst.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(args.file, "rb") as f:
        for path, data in iter_entries(f):
            out = dst / path
            if not out.resolve().is_relative_to(dst.resolve()):
                raise ShardstoreError(f"entry {path!r} escapes {dst}")
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(data)
            count += 1
    print(f"extracted {count} file(s) to {dst}")
    return EXIT_OK


# -- cluster lifecycle ---------------------------------------------------------


def _free_ports(count: int, base: int) -> List[int]:
    """Scan upward from ``base`` for ports that accept a bind right now."""
    ports: List[int] = []
    candidate = base
    while len(ports) < count:
        if candidate > 65535:
            raise ShardstoreError("ran out of ports")
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind(("127.0.0.1", candidate))
            except OSError:
                candidate += 1
                continue
        ports.append(candidate)
        candidate += 1
    return ports


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _read_lock(root: Path) -> Optional[Dict[str, int]]:
    lock = root / CLUSTER_LOCK
    if not lock.exists():
        return None
    try:
        return {k: int(v) for k, v in json.loads(lock.read_text())["pids"].items()}
    except (ValueError, KeyError, OSError):
        return {}


def _terminate(pids: Dict[str, int], grace: float = 5.0) -> None:
    for pid in pids.values():
        if _pid_alive(pid):
            try:
                os.kill(pid, signal.SIGTERM)
            except OSError:
                pass
    deadline = time.monotonic() + grace
    while time.monotonic() < deadline and any(_pid_alive(p) for p in pids.values()):
        time.sleep(0.05)
    for pid in pids.values():
        if _pid_alive(pid):
            try:
                os.kill(pid, signal.SIGKILL)
            except OSError:
                pass


def cmd_cluster_start(args: argparse.Namespace) -> int:
    root = Path(args.root).absolute()
    root.mkdir(parents=True, exist_ok=True)
    existing = _read_lock(root)
    if existing is not None:
        if any(_pid_alive(p) for p in existing.values()):
            raise ShardstoreError(f"cluster already running at {root} (lockfile present)")
        log.warning("removing stale lockfile at %s", root / CLUSTER_LOCK)
        (root / CLUSTER_LOCK).unlink()

    ports = _free_ports(args.gateways + args.targets, args.base_port)
    gateway_ports, target_ports = ports[: args.gateways], ports[args.gateways :]
    config = {
        "gateways": [f"127.0.0.1:{p}" for p in gateway_ports],
        "targets": [
            {
                "id": f"t{i}",
                "endpoint": f"127.0.0.1:{p}",
                "mountpaths": [
                    str(root / f"t{i}" / f"mp{j}")
                    for j in range(args.mountpaths_per_target)
                ],
            }
            for i, p in enumerate(target_ports)
        ],
    }
    config_path = root / CLUSTER_CONFIG
    config_path.write_text(json.dumps(config, indent=2) + "\n")
    logs = root / "logs"
    logs.mkdir(exist_ok=True)

    node_args: List[str] = []
    if not args.verify_checksums:
        node_args.append("--no-verify-checksums")
    if args.read_rate_mbps is not None:
        node_args += ["--read-rate-mbps", str(args.read_rate_mbps)]

    pids: Dict[str, int] = {}

    def spawn(role: str, node_id: str) -> None:
        logfile = open(logs / f"{role}-{node_id}.log", "ab")
        try:
            proc = subprocess.Popen(
                [
                    sys.executable,
                    "-m",
                    "shardstore",
                    "node",
                    "--role",
                    role,
                    "--id",
                    node_id,
                    "--config",
                    str(config_path),
                    *node_args,
                ],
                stdout=logfile,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        finally:
            logfile.close()
        pids[f"{role}:{node_id}"] = proc.pid

    try:
        for spec in config["targets"]:
            spawn("target", spec["id"])
        for i in range(args.gateways):
            spawn("gateway", str(i))

        # A node is up when its health endpoint answers; give slow disks
        # a generous window but fail fast if a process already died.
        endpoints = [t["endpoint"] for t in config["targets"]] + config["gateways"]
        deadline = time.monotonic() + args.startup_timeout
        waiting = set(endpoints)
        while waiting and time.monotonic() < deadline:
            for key, pid in pids.items():
                if not _pid_alive(pid):
                    raise ShardstoreError(
                        f"node {key} exited during startup; see {logs}/{key.replace(':', '-')}.log"
                    )
            for ep in sorted(waiting):
                try:
                    status, _ = http_json("GET", ep, "/v1/health", timeout=1.0)
                except OSError:
                    continue
                if status == 200:
                    waiting.discard(ep)
            if waiting:
                time.sleep(0.1)
        if waiting:
            raise ShardstoreError(f"nodes never became healthy: {sorted(waiting)}")
    except Exception:
        _terminate(pids)
        config_path.unlink(missing_ok=True)
        raise

    (root / CLUSTER_LOCK).write_text(json.dumps({"pids": pids}, indent=2) + "\n")
    print(f"cluster running at {root}")
    print(f"gateway: http://{config['gateways'][0]}")
    print(f"targets: {len(config['targets'])}  gateways: {args.gateways}")
    return EXIT_OK


def cmd_cluster_stop(args: argparse.Namespace) -> int:
    root = Path(args.root).absolute()
    pids = _read_lock(root)
    if pids is None:
        print(f"no cluster running at {root}", file=sys.stderr)
        return EXIT_FAILURE
    _terminate(pids)
    (root / CLUSTER_LOCK).unlink(missing_ok=True)
    print(f"stopped {len(pids)} node(s)")
    return EXIT_OK


def cmd_cluster_status(args: argparse.Namespace) -> int:
    root = Path(args.root).absolute()
    config_path = root / CLUSTER_CONFIG
    if not config_path.exists():
        print(f"no cluster at {root}", file=sys.stderr)
        return EXIT_FAILURE
    config = json.loads(config_path.read_text())
    nodes = []
    for spec in config["targets"]:
        nodes.append(("target", spec["id"], spec["endpoint"]))
    for i, ep in enumerate(config["gateways"]):
        nodes.append(("gateway", str(i), ep))

    rows = []
    map_version: Optional[int] = None
    for role, node_id, ep in nodes:
        try:
            status, payload = http_json("GET", ep, "/v1/health", timeout=1.0)
            alive = status == 200
        except OSError:
            alive, payload = False, {}
        if alive and map_version is None and "map_version" in payload:
            map_version = int(payload["map_version"])  # type: ignore[arg-type]
        rows.append({"role": role, "id": node_id, "endpoint": ep, "alive": alive})
    running = all(r["alive"] for r in rows)
    if args.json:
        print(
            json.dumps(
                {
                    "root": str(root),
                    "running": running,
                    "map_version": map_version,
                    "nodes": rows,
                },
                indent=2,
            )
        )
    else:
        for r in rows:
            state = "up" if r["alive"] else "DOWN"
            print(f"{r['role']:<8} {r['id']:<6} {r['endpoint']:<22} {state}")
        print(f"running: {running}  map_version: {map_version}")
    return EXIT_OK if running else EXIT_FAILURE


def cmd_node(args: argparse.Namespace) -> int:
    from .cluster.httpd import stop_server
    from .cluster.local import serve_node

    server = serve_node(
        args.role,
        args.id,
        Path(args.config),
        verify_checksums=args.verify_checksums,
        read_rate_mbps=args.read_rate_mbps,
    )
    stop = threading.Event()

    def on_signal(signum: int, frame: object) -> None:
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    log.info("%s %s ready on %s", args.role, args.id, server.endpoint)
    while not stop.is_set():
        stop.wait(1.0)
    stop_server(server)
    return EXIT_OK


# -- object I/O ----------------------------------------------------------------


def cmd_mkbucket(args: argparse.Namespace) -> int:
    with client_for(args) as client:
        client.create_bucket(args.bucket, mirror=args.mirror)
    print(f"bucket {args.bucket} (mirror={args.mirror})")
    return EXIT_OK


def cmd_put(args: argparse.Namespace) -> int:
    dest = args.dest
    if dest.endswith("/"):
        dest += Path(args.source).name
    bucket, name = split_object_path(dest, op="put")
    with client_for(args) as client, open(args.source, "rb") as f:
        meta = client.put_file(bucket, name, f)
    print(f"{bucket}/{name}  {meta.get('size')} bytes  {meta.get('checksum')}")
    return EXIT_OK


def cmd_get(args: argparse.Namespace) -> int:
    bucket, name = split_object_path(args.source, op="get")
    out = args.dest or Path(name).name
    with client_for(args) as client:
        if out == "-":
            client.get_to(bucket, name, sys.stdout.buffer.write)
            sys.stdout.buffer.flush()
        else:
            with open(out, "wb") as f:
                n = client.get_to(bucket, name, f.write)
            print(f"{out}  {n} bytes")
    return EXIT_OK


def cmd_ls(args: argparse.Namespace) -> int:
    bucket, prefix = split_bucket_prefix(args.path)
    with client_for(args) as client:
        rows = [
            {"name": name, "size": size}
            for name, size in client.list(bucket, prefix=prefix)
        ]
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            print(f"{row['size']:>12}  {row['name']}")
    return EXIT_OK


def cmd_rm(args: argparse.Namespace) -> int:
    bucket, name = split_object_path(args.path, op="rm")
    with client_for(args) as client:
        client.delete(bucket, name)
    return EXIT_OK


# -- reshard / bench / inflate ---------------------------------------------------


def cmd_reshard(args: argparse.Namespace) -> int:
    src_bucket, src_prefix = split_bucket_prefix(args.src)
    spec = ReshardSpec(
        src_bucket=src_bucket,
        src_prefix=src_prefix,
        dst_bucket=args.dst,
        order=args.order,
        target_shard_bytes=parse_size(args.target_size),
        min_shard_bytes=parse_size(args.min_size) if args.min_size else 1,
        template=args.template,
    )
    with client_for(args) as client:
        stats = reshard(client, spec, workers=args.workers)
    total_records = sum(s.record_count for s in stats)
    print(
        f"reshard {src_bucket}/{src_prefix} -> {args.dst}: "
        f"{len(stats)} shard(s), {total_records} record(s)"
    )
    return EXIT_OK


def _print_report(report: BenchReport) -> None:
    state = "ok" if report.valid else f"INVALID ({report.error})"
    print(
        f"{report.mode}: {report.total_bytes} bytes in {report.wall_seconds:.2f}s "
        f"= {report.aggregate_mb_per_s:.1f} MB/s  [{state}]"
    )


def _emit_reports(report: BenchReport, args: argparse.Namespace) -> None:
    emit_report(report, "json", Path(args.report))
    if args.csv:
        emit_report(report, "csv", Path(args.csv))
    _print_report(report)


def cmd_bench_delivery(args: argparse.Namespace) -> int:
    config = BenchConfig(
        mode="delivery",
        bucket=args.bucket,
        prefix=args.prefix,
        consumers=args.consumers,
        workers_per_consumer=args.workers,
        seconds=args.seconds,
        shard_count=args.shards,
        seed=args.seed,
    )
    endpoint = resolve_endpoint(args)
    report = run_delivery_bench(lambda: StoreClient(endpoint), config)
    _emit_reports(report, args)
    return EXIT_OK if report.valid else EXIT_FAILURE


def cmd_bench_loop(args: argparse.Namespace) -> int:
    config = BenchConfig(
        mode="loop",
        bucket=args.bucket,
        prefix=args.prefix,
        consumers=args.consumers,
        workers_per_consumer=args.workers,
        batch_size=args.batch,
        iterations=args.iters,
        seed=args.seed,
        shuffle_capacity=args.shuffle_capacity,
        avg_sample_bytes=args.avg_sample_bytes,
        consumer_rate_limit_mbps=args.rate_limit_mbps,
    )
    endpoint = resolve_endpoint(args)
    with StoreClient(endpoint) as metrics_client:
        shards = [n for n, _ in metrics_client.list(args.bucket, prefix=args.prefix)]
        report = run_loop_bench(
            lambda: ClusterSource(StoreClient(endpoint), args.bucket),
            shards,
            config,
            metrics_client=metrics_client,
        )
    _emit_reports(report, args)
    return EXIT_OK if report.valid else EXIT_FAILURE


def cmd_inflate(args: argparse.Namespace) -> int:
    target_size = parse_size(args.target_size)
    src_dir = Path(args.src)
    src_is_local = src_dir.is_dir()
    dst_dir = Path(args.dst)
    dst_is_local = dst_dir.is_dir() or os.sep in args.dst

    client: Optional[StoreClient] = None
    if not src_is_local or not dst_is_local:
        client = client_for(args)
    try:

        def source_records() -> Iterator[Record]:
            if src_is_local:
                # A directory of shards inflates shard-to-shard; anything
                # else is treated as loose component files.
                if any(src_dir.glob("*.tar")):
                    return read_shard_dir_records(src_dir)
                return iter_loose_records(src_dir)
            bucket, prefix = split_bucket_prefix(args.src)
            return read_bucket_records(client, bucket, prefix)

        if dst_is_local:
            dst_dir.mkdir(parents=True, exist_ok=True)

            def emit(name: str, spool) -> None:
                with open(dst_dir / name, "wb") as out:
                    while True:
                        chunk = spool.read(1 << 20)
                        if not chunk:
                            break
                        out.write(chunk)

        else:
            try:
                client.create_bucket(args.dst)
            except ApiError as exc:
                if exc.status != 409:
                    raise

            def emit(name: str, spool) -> None:
                client.put_file(args.dst, name, spool)

        stats = inflate_dataset(
            source_records, args.factor, args.seed, target_size, emit,
            template=args.template,
        )
    finally:
        if client is not None:
            client.close()
    records = sum(s.record_count for s in stats)
    print(f"inflated x{args.factor}: {records} record(s) in {len(stats)} shard(s)")
    return EXIT_OK


# -- parser wiring ---------------------------------------------------------------


def _add_endpoint_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--endpoint", help="gateway endpoint (host:port or URL)")
    parser.add_argument("--root", help="local cluster root (reads its config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shardstore", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--log-level",
        default=os.environ.get("SHARDSTORE_LOG", "warning"),
        choices=["debug", "info", "warning", "error"],
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    # shard
    shard = sub.add_parser("shard", help="author and inspect tar shards")
    shard_sub = shard.add_subparsers(dest="shard_command", metavar="ACTION")
    create = shard_sub.add_parser("create", help="pack a directory into shards")
    create.add_argument("--src", required=True, help="directory of loose files")
    create.add_argument("--dst", required=True, help="output template, e.g. out-%%06d.tar")
    create.add_argument("--target-size", required=True, help="payload bytes per shard")
    create.set_defaults(func=cmd_shard_create)
    ls_p = shard_sub.add_parser("ls", help="list entries")
    ls_p.add_argument("file")
    ls_p.add_argument("--json", action="store_true")
    ls_p.set_defaults(func=cmd_shard_ls)
    cat = shard_sub.add_parser("cat", help="stream one entry to stdout")
    cat.add_argument("file")
    cat.add_argument("entry", help="entry path, e.g. 000123.png")
    cat.set_defaults(func=cmd_shard_cat)
    extract = shard_sub.add_parser("extract", help="unpack all entries")
    extract.add_argument("file")
    extract.add_argument("--dst", required=True)
    extract.set_defaults(func=cmd_shard_extract)

    # cluster
    cluster = sub.add_parser("cluster", help="local cluster lifecycle")
    cluster_sub = cluster.add_subparsers(dest="cluster_command", metavar="ACTION")
    start = cluster_sub.add_parser("start", help="spawn target/gateway processes")
    start.add_argument("--root", required=True)
    start.add_argument("--targets", type=int, default=3)
    start.add_argument("--gateways", type=int, default=1)
    start.add_argument("--mountpaths-per-target", type=int, default=1)
    start.add_argument("--base-port", type=int, default=BASE_PORT)
    start.add_argument("--startup-timeout", type=float, default=20.0)
    start.add_argument("--read-rate-mbps", type=float, default=None,
                       help="per-mountpath read throttle (disk emulation)")
    start.add_argument("--no-verify-checksums", dest="verify_checksums",
                       action="store_false")
    start.set_defaults(func=cmd_cluster_start)
    stop = cluster_sub.add_parser("stop", help="terminate a running cluster")
    stop.add_argument("--root", required=True)
    stop.set_defaults(func=cmd_cluster_stop)
    status = cluster_sub.add_parser("status", help="health of every node")
    status.add_argument("--root", required=True)
    status.add_argument("--json", action="store_true")
    status.set_defaults(func=cmd_cluster_status)

    # node (internal foreground runner used by cluster start)
    node = sub.add_parser("node")
    node.add_argument("--role", required=True, choices=["target", "gateway"])
    node.add_argument("--id", required=True)
    node.add_argument("--config", required=True)
    node.add_argument("--read-rate-mbps", type=float, default=None)
    node.add_argument("--no-verify-checksums", dest="verify_checksums",
                      action="store_false")
    node.set_defaults(func=cmd_node)

    # object I/O
    mkbucket = sub.add_parser("mkbucket", help="create a bucket")
    mkbucket.add_argument("bucket")
    mkbucket.add_argument("--mirror", type=int, default=1)
    _add_endpoint_flags(mkbucket)
    mkbucket.set_defaults(func=cmd_mkbucket)
    put = sub.add_parser("put", help="upload a file")
    put.add_argument("source", help="local file")
    put.add_argument("dest", help="BUCKET/NAME (trailing / keeps the basename)")
    _add_endpoint_flags(put)
    put.set_defaults(func=cmd_put)
    get = sub.add_parser("get", help="download an object")
    get.add_argument("source", help="BUCKET/NAME")
    get.add_argument("dest", nargs="?", help="local file or - for stdout")
    _add_endpoint_flags(get)
    get.set_defaults(func=cmd_get)
    ls = sub.add_parser("ls", help="list objects")
    ls.add_argument("path", help="BUCKET or BUCKET/PREFIX")
    ls.add_argument("--json", action="store_true")
    _add_endpoint_flags(ls)
    ls.set_defaults(func=cmd_ls)
    rm = sub.add_parser("rm", help="delete an object")
    rm.add_argument("path", help="BUCKET/NAME")
    _add_endpoint_flags(rm)
    rm.set_defaults(func=cmd_rm)

    # reshard
    reshard_p = sub.add_parser("reshard", help="redistribute records into new shards")
    reshard_p.add_argument("--src", required=True, help="BUCKET or BUCKET/PREFIX")
    reshard_p.add_argument("--dst", required=True, help="destination bucket")
    reshard_p.add_argument("--order", default="key", help="key or random:SEED")
    reshard_p.add_argument("--target-size", required=True)
    reshard_p.add_argument("--min-size", default=None)
    reshard_p.add_argument("--template", default="shard-%06d.tar")
    reshard_p.add_argument("--workers", type=int, default=4)
    _add_endpoint_flags(reshard_p)
    reshard_p.set_defaults(func=cmd_reshard)

    # bench
    bench = sub.add_parser("bench", help="throughput benchmarks")
    bench_sub = bench.add_subparsers(dest="bench_command", metavar="MODE")
    delivery = bench_sub.add_parser("delivery", help="raw shard delivery rate")
    delivery.add_argument("--bucket", required=True)
    delivery.add_argument("--prefix", default="")
    delivery.add_argument("--consumers", type=int, default=1)
    delivery.add_argument("--workers", type=int, default=5)
    delivery.add_argument("--seconds", type=float, default=None)
    delivery.add_argument("--shards", type=int, default=None,
                          help="stop after this many shard fetches")
    delivery.add_argument("--seed", type=int, default=0)
    delivery.add_argument("--report", default="report.json")
    delivery.add_argument("--csv", default=None)
    _add_endpoint_flags(delivery)
    delivery.set_defaults(func=cmd_bench_delivery)
    loop = bench_sub.add_parser("loop", help="full pipeline consumption rate")
    loop.add_argument("--bucket", required=True)
    loop.add_argument("--prefix", default="")
    loop.add_argument("--batch", type=int, default=256)
    loop.add_argument("--iters", type=int, default=200)
    loop.add_argument("--workers", type=int, default=5)
    loop.add_argument("--consumers", type=int, default=1)
    loop.add_argument("--seed", type=int, default=0)
    loop.add_argument("--shuffle-capacity", type=int, default=1000)
    loop.add_argument("--avg-sample-bytes", type=float, default=None)
    loop.add_argument("--rate-limit-mbps", type=float, default=None)
    loop.add_argument("--report", default="report.json")
    loop.add_argument("--csv", default=None)
    _add_endpoint_flags(loop)
    loop.set_defaults(func=cmd_bench_loop)

    # inflate
    inflate = sub.add_parser("inflate", help="duplicate a dataset under fresh keys")
    inflate.add_argument("--src", required=True, help="shard DIR, loose-file DIR, or BUCKET/PREFIX")
    inflate.add_argument("--dst", required=True, help="output DIR or bucket")
    inflate.add_argument("--factor", type=int, required=True)
    inflate.add_argument("--seed", type=int, default=0)
    inflate.add_argument("--target-size", default="256MiB")
    inflate.add_argument("--template", default="inflated-%06d.tar")
    _add_endpoint_flags(inflate)
    inflate.set_defaults(func=cmd_inflate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, args.log_level.upper()),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        func = getattr(args, "func", None)
        if func is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ObjectNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ShardstoreError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
