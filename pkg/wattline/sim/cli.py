"""
wattline-sim: synthetic cluster generation, the mock TSDB service, a
standalone scrape driver and the whole-stack benchmark run.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional

import httpx

from wattline import __version__
from wattline.core.exceptions import ConfigError, GenerationError, WattlineError
from wattline.core.logging import configure_logging
from wattline.main import bind_socket, serve
from wattline.sim.generator import generate_cluster, load_cluster_spec
from wattline.sim.pipeline import STAGES, run_pipeline
from wattline.sim.scrape import RemoteSink, load_targets, scrape_loop
from wattline.sim.tsdb import MockTSDB, create_tsdb_app

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wattline-sim", description="wattline cluster simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", choices=["debug", "info", "warning", "error"], default="info")
    commands = parser.add_subparsers(dest="command", required=True)

    gen_cmd = commands.add_parser("generate", help="Write a synthetic cluster trace")
    gen_cmd.add_argument("--spec", type=Path, required=True, help="Cluster spec YAML file")
    gen_cmd.add_argument("--out", type=Path, required=True)
    gen_cmd.add_argument("--materialize", choices=["all", "none"], default="all")

    tsdb_cmd = commands.add_parser("tsdb", help="Serve the mock TSDB")
    tsdb_cmd.add_argument("--load", type=Path, help="Seed from a generator manifest")
    tsdb_cmd.add_argument("--web.listen-address", dest="listen_address", default="127.0.0.1:9090")

    scrape_cmd = commands.add_parser("scrape", help="Poll exporters into a running mock TSDB")
    scrape_cmd.add_argument("--targets", type=Path, required=True, help="Targets YAML file")
    scrape_cmd.add_argument("--interval", type=float, default=15.0, help="Seconds between cycles")
    scrape_cmd.add_argument("--tsdb", required=True, help="Mock TSDB base URL")
    scrape_cmd.add_argument("--cycles", type=int, help="Stop after N cycles")

    run_cmd = commands.add_parser("run", help="Simulate the whole stack in one process")
    run_cmd.add_argument("--spec", type=Path, required=True, help="Cluster spec YAML file")
    run_cmd.add_argument("--out", type=Path, required=True)
    run_cmd.add_argument("--registry-interval", type=float, default=900.0)
    run_cmd.add_argument("--backup-interval", type=float, default=3600.0)
    return parser


async def _scrape_loop(args: argparse.Namespace) -> int:
    targets = load_targets(args.targets)
    async with httpx.AsyncClient(timeout=10.0) as client:
        return await scrape_loop(targets, client, RemoteSink(client, args.tsdb), args.interval, args.cycles)


def _print_run(report) -> None:
    print(f"{'stage':<12}{'seconds':>12}")
    for stage in STAGES:
        print(f"{stage:<12}{report.timings.get(stage, 0.0):>12.3f}")
    print(f"{'total':<12}{report.total_seconds:>12.3f}")
    print(
        f"scrapes={report.scrapes} failed={report.failed_scrapes} parse_errors={report.parse_errors} "
        f"roundtrip_mismatches={report.roundtrip_mismatches} registry_cycles={report.registry_cycles} "
        f"deletions={report.deletions} backups={len(report.backups)}"
    )


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        if args.command == "generate":
            generate_cluster(load_cluster_spec(args.spec), args.out, args.materialize)
        elif args.command == "run":
            report = asyncio.run(
                run_pipeline(
                    load_cluster_spec(args.spec),
                    args.out,
                    registry_interval_s=args.registry_interval,
                    backup_interval_s=args.backup_interval or None,
                )
            )
            _print_run(report)
        elif args.command == "scrape":
            asyncio.run(_scrape_loop(args))
        elif args.command == "tsdb":
            tsdb = MockTSDB.from_manifest(args.load) if args.load else MockTSDB()
            sock = bind_socket(args.listen_address)
            try:
                asyncio.run(serve([(create_tsdb_app(tsdb), sock)], args.log_level))
            finally:
                sock.close()
    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return 1
    except (GenerationError, WattlineError, OSError) as e:
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        logger.info("🛑 Interrupted")
    return 0


if __name__ == "__main__":
    sys.exit(main())
