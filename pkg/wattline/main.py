"""
Service entrypoints.

`wattline <service> --config stack.yaml` starts one service; flags win over
the file. Exit codes: 0 clean, 1 configuration error, 2 runtime failure.
"""

import argparse
import asyncio
import getpass
import logging
import socket
import sys
import time
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Callable, Optional

import httpx
import uvicorn
from fastapi import FastAPI, Request, Response, status
from fastapi.exception_handlers import http_exception_handler
from fastapi.responses import JSONResponse, PlainTextResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from wattline import __version__
from wattline.core.config import (
    EnvSettings,
    StackConfig,
    load_config,
    require_section,
)
from wattline.core.exceptions import ConfigError, IngestError, WattlineError
from wattline.core.logging import configure_logging
from wattline.core.security import BasicAuthGuard, hash_password
from wattline.db.database import build_engine, init_db, session_factory
from wattline.routers import admin, exporter, gate, registry
from wattline.services.balancer import BackendPool
from wattline.services.emissions import EmissionsService
from wattline.services.exporter import NodeExporter
from wattline.services.gate import (
    BackendProxy,
    HTTPOwnershipClient,
    OwnershipClient,
    StoreOwnershipClient,
)
from wattline.services.registry import Registry, build_adapter
from wattline.services.rules import generate_rule_file, load_profile_file
from wattline.services.tsdb_client import TSDBClient
from wattline.sim.tsdb import MockTSDB, create_tsdb_app

logger = logging.getLogger("wattline")

SERVICES = ("exporter", "registry", "gate", "tsdb")
COLLECTORS = ("cgroup", "node", "rapl", "ipmi", "gpumap")
SHUTDOWN_GRACE_SECONDS = 30


# ============================================================================
# App factories
# ============================================================================

def _install_common(app: FastAPI, service: str) -> None:
    """/health plus the error handlers every wattline app shares"""

    @app.get("/health", tags=["Health"], response_class=PlainTextResponse)
    async def health_check():
        return "ok"

    @app.exception_handler(StarletteHTTPException)
    async def http_error_handler(request: Request, exc: StarletteHTTPException):
        if exc.status_code == status.HTTP_401_UNAUTHORIZED:
            return Response(status_code=exc.status_code, headers=exc.headers)
        return await http_exception_handler(request, exc)

    @app.exception_handler(Exception)
    async def global_exception_handler(request: Request, exc: Exception):
        logger.exception("❌ Unhandled error in %s: %s", service, exc)
        return JSONResponse(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            content={"error": "Internal server error"},
        )


def create_exporter_app(
    config: StackConfig,
    node_exporter: Optional[NodeExporter] = None,
    clock: Callable[[], float] = time.time,
) -> FastAPI:
    section = require_section(config, "exporter")
    node_exporter = node_exporter or NodeExporter.from_config(section, clock)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info(
            "🚀 Exporter starting on %s (collectors: %s, fs root: %s)",
            section.listen_address, ", ".join(node_exporter.enabled), node_exporter.fs_root,
        )
        yield
        logger.info("🛑 Exporter shutting down")

    app = FastAPI(
        title="wattline exporter", version=__version__, docs_url=None, redoc_url=None,
        lifespan=lifespan,
    )
    app.state.auth_guard = BasicAuthGuard(config.shared.basic_auth)
    app.state.exporter = node_exporter
    app.include_router(exporter.router, tags=["Metrics"])
    _install_common(app, "exporter")
    return app


def build_registry(
    config: StackConfig,
    env: Optional[EnvSettings] = None,
    clock: Callable[[], float] = time.time,
    http_client: Optional[httpx.AsyncClient] = None,
    as_of_ingest: bool = False,
) -> Registry:
    section = require_section(config, "registry")
    env = env or EnvSettings()
    try:
        adapter = build_adapter(section)
    except IngestError as e:
        raise ConfigError(str(e)) from None
    emissions = None
    if config.emissions is not None:
        emissions = EmissionsService.from_config(config.emissions, env.emission_token, clock)
    engine = build_engine(section.database_path)
    init_db(engine)
    tsdb = TSDBClient(
        section.tsdb_url,
        section.tsdb_admin_url,
        retries=section.tsdb_retries,
        backoff_seconds=section.tsdb_backoff_seconds,
        http_client=http_client,
    )
    return Registry(
        section, engine, session_factory(engine), tsdb, adapter, emissions, clock, as_of_ingest
    )


def create_registry_app(
    config: StackConfig,
    registry_service: Optional[Registry] = None,
    run_writer: bool = True,
) -> FastAPI:
    section = require_section(config, "registry")
    registry_service = registry_service or build_registry(config)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info(
            "🚀 Registry starting on %s (cluster %s, store %s)",
            section.listen_address, section.cluster_id, section.database_path,
        )
        stop = asyncio.Event()
        writer = asyncio.create_task(registry_service.run_forever(stop)) if run_writer else None
        yield
        logger.info("🛑 Registry shutting down; letting the writer finish its cycle")
        stop.set()
        if writer is not None:
            await writer
        await registry_service.tsdb.aclose()
        registry_service.engine.dispose()

    app = FastAPI(
        title="wattline registry", version=__version__, docs_url=None, redoc_url=None,
        lifespan=lifespan,
    )
    app.state.auth_guard = BasicAuthGuard(config.shared.basic_auth)
    app.state.session_factory = registry_service.sessions
    app.state.cluster_id = section.cluster_id
    app.state.registry = registry_service
    app.include_router(registry.router, prefix="/api/v1", tags=["Registry"])
    _install_common(app, "registry")
    return app


def build_ownership_client(config: StackConfig, env: Optional[EnvSettings] = None) -> OwnershipClient:
    section = require_section(config, "gate")
    if section.registry_db_path is not None:
        return StoreOwnershipClient(section.registry_db_path, section.cluster_id)
    env = env or EnvSettings()
    auth = None
    if config.shared.basic_auth is not None and env.registry_password:
        auth = (config.shared.basic_auth.username, env.registry_password)
    return HTTPOwnershipClient(
        section.registry_url, section.cluster_id, auth, section.timeout_seconds
    )


def create_gate_app(
    config: StackConfig,
    ownership: Optional[OwnershipClient] = None,
    proxy: Optional[BackendProxy] = None,
    health_client: Optional[httpx.AsyncClient] = None,
    run_health_checks: bool = True,
) -> FastAPI:
    section = require_section(config, "gate")
    if proxy is None:
        proxy = BackendProxy(BackendPool(section.backends, section.strategy), section.timeout_seconds)
    pool = proxy.pool
    ownership = ownership or build_ownership_client(config)

    async def health_loop(stop: asyncio.Event) -> None:
        client = health_client or httpx.AsyncClient()
        try:
            while not stop.is_set():
                await pool.check_health(client)
                try:
                    await asyncio.wait_for(stop.wait(), timeout=section.health_check_interval_seconds)
                except TimeoutError:
                    pass
        finally:
            if health_client is None:
                await client.aclose()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info(
            "🚀 Gate starting on %s with %d backends (%s)",
            section.listen_address, len(pool.backends), section.strategy,
        )
        stop = asyncio.Event()
        checker = asyncio.create_task(health_loop(stop)) if run_health_checks else None
        yield
        logger.info("🛑 Gate shutting down")
        stop.set()
        if checker is not None:
            await checker
        await proxy.aclose()
        await ownership.aclose()

    app = FastAPI(
        title="wattline gate", version=__version__, docs_url=None, redoc_url=None,
        lifespan=lifespan,
    )
    app.state.auth_guard = BasicAuthGuard(config.shared.basic_auth)
    app.state.id_label = section.id_label
    app.state.metric_allowlist = frozenset(section.metric_allowlist)
    app.state.ownership = ownership
    app.state.proxy = proxy
    app.state.pool = pool
    app.include_router(gate.router, tags=["Gate"])
    _install_common(app, "gate")
    return app


def create_admin_app(proxy: BackendProxy) -> FastAPI:
    """Private listener for the registry's series deletes"""
    app = FastAPI(title="wattline gate admin", version=__version__, docs_url=None, redoc_url=None)
    app.state.proxy = proxy
    app.include_router(admin.router, tags=["Admin"])
    _install_common(app, "gate-admin")
    return app


def create_tsdb_service_app(config: StackConfig) -> FastAPI:
    section = require_section(config, "tsdb")
    tsdb = MockTSDB.from_manifest(section.manifest) if section.manifest else MockTSDB()
    app = create_tsdb_app(tsdb)
    _install_common(app, "tsdb")
    return app


# ============================================================================
# Serving
# ============================================================================

def bind_socket(address: str) -> socket.socket:
    """Bind before serving so a busy port fails fast"""
    host, _, port = address.rpartition(":")
    host = host.strip("[]") or "0.0.0.0"
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, int(port)))
    except OSError:
        sock.close()
        raise
    sock.set_inheritable(True)
    return sock


async def serve(listeners: list[tuple[FastAPI, socket.socket]], log_level: str) -> None:
    servers = [
        uvicorn.Server(
            uvicorn.Config(
                app,
                log_level=log_level,
                lifespan="on",
                timeout_graceful_shutdown=SHUTDOWN_GRACE_SECONDS,
            )
        )
        for app, _ in listeners
    ]
    await asyncio.gather(
        *(server.serve(sockets=[sock]) for server, (_, sock) in zip(servers, listeners))
    )


def build_service(name: str, config: StackConfig) -> list[tuple[FastAPI, str]]:
    """Apps and listen addresses of one service"""
    if name == "exporter":
        return [(create_exporter_app(config), config.exporter.listen_address)]
    if name == "registry":
        return [(create_registry_app(config), config.registry.listen_address)]
    if name == "tsdb":
        return [(create_tsdb_service_app(config), config.tsdb.listen_address)]
    app = create_gate_app(config)
    listeners = [(app, config.gate.listen_address)]
    if config.gate.admin_listen_address:
        listeners.append((create_admin_app(app.state.proxy), config.gate.admin_listen_address))
    return listeners


# ============================================================================
# CLI
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wattline", description="Per-workload energy and emissions monitoring"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="Stack YAML file")
    common.add_argument("--web.listen-address", dest="listen_address", help="host:port to serve on")
    common.add_argument("--log-level", choices=["debug", "info", "warning", "error"])

    exporter_cmd = commands.add_parser("exporter", parents=[common], help="Run the node exporter")
    for name in COLLECTORS:
        exporter_cmd.add_argument(
            f"--collector.{name}",
            dest=f"collector_{name}",
            action=argparse.BooleanOptionalAction,
            default=None,
            help=f"Enable the {name} collector",
        )
    exporter_cmd.add_argument("--path.fs-root", dest="fs_root", type=Path, help="Filesystem prefix")

    commands.add_parser("registry", parents=[common], help="Run the workload registry")
    gate_cmd = commands.add_parser("gate", parents=[common], help="Run the access gate")
    gate_cmd.add_argument(
        "--web.admin-listen-address", dest="admin_listen_address", help="Private admin listener"
    )
    commands.add_parser("tsdb", parents=[common], help="Run the mock TSDB")

    rules_cmd = commands.add_parser("rules", help="Print recording rules for hardware profiles")
    rules_cmd.add_argument("--profile", type=Path, required=True, help="Profile YAML file")
    rules_cmd.add_argument("--rate-window", default="2m")

    hash_cmd = commands.add_parser("hash-password", help="Hash a password for shared.basic_auth")
    hash_cmd.add_argument("--password", help="Read from a prompt when omitted")
    return parser


def apply_overrides(config: StackConfig, args: argparse.Namespace) -> StackConfig:
    overrides = {"listen_address": args.listen_address}
    if args.command == "exporter":
        overrides["fs_root"] = str(args.fs_root) if args.fs_root else None
        for name in COLLECTORS:
            overrides[f"collectors.{name}"] = getattr(args, f"collector_{name}")
    if args.command == "gate":
        overrides["admin_listen_address"] = args.admin_listen_address
    if all(v is None for v in overrides.values()):
        return config
    require_section(config, args.command)
    return config.with_overrides(args.command, **overrides)


def _read_password(args: argparse.Namespace) -> str:
    if args.password:
        return args.password
    first = getpass.getpass("Password: ")
    if first != getpass.getpass("Repeat password: "):
        raise ConfigError("passwords do not match")
    return first


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "hash-password":
        try:
            print(hash_password(_read_password(args)))
        except ConfigError as e:
            print(f"❌ {e}", file=sys.stderr)
            return 1
        return 0
    if args.command == "rules":
        try:
            sys.stdout.write(generate_rule_file(load_profile_file(args.profile), rate_window=args.rate_window))
        except WattlineError as e:
            print(f"❌ {e}", file=sys.stderr)
            return 1
        return 0

    try:
        config = apply_overrides(load_config(args.config), args)
        require_section(config, args.command)
        configure_logging(args.log_level or config.shared.log_level)
        logger.debug("Configuration: %s", config.redacted())
        listeners = build_service(args.command, config)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return 1

    bound: list[tuple[FastAPI, socket.socket]] = []
    try:
        for app, address in listeners:
            bound.append((app, bind_socket(address)))
    except OSError as e:
        logger.error("❌ Cannot bind listener: %s", e)
        for _, sock in bound:
            sock.close()
        return 2
    try:
        asyncio.run(serve(bound, args.log_level or config.shared.log_level))
    except (WattlineError, OSError) as e:
        logger.error("❌ %s stopped: %s", args.command, e)
        return 2
    finally:
        for _, sock in bound:
            sock.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
