"""
Whole-stack run in one process: generate a cluster, serve every node's
fixtures through a real exporter app, scrape into the mock TSDB, record
attributed power and let the registry ingest, aggregate and purge on a
simulated clock.
"""

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import httpx

from wattline.core.config import (
    CollectorToggles,
    EmissionsConfig,
    EnvSettings,
    ExporterConfig,
    IPMIConfig,
    RegistryConfig,
    StackConfig,
)
from wattline.main import build_registry, create_exporter_app
from wattline.services.exporter import NodeExporter
from wattline.services.recorder import PowerRecorder
from wattline.sim.generator import ClusterSpec, ClusterTrace, generate_cluster
from wattline.sim.scrape import LocalSink, ScrapeTarget, run_scrape_cycle
from wattline.sim.tsdb import MockTSDB, create_tsdb_app

logger = logging.getLogger(__name__)

TSDB_URL = "http://tsdb"
STAGES = ("generate", "scrape", "record", "ingest", "aggregate", "purge")


class SimClock:
    """Wall clock replacement advanced by the pipeline, in seconds"""

    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now


class SwitchableTransport(httpx.AsyncBaseTransport):
    """Wraps an exporter transport; while down, requests fail to connect"""

    def __init__(self, inner: httpx.AsyncBaseTransport):
        self.inner = inner
        self.down = False

    async def handle_async_request(self, request: httpx.Request) -> httpx.Response:
        if self.down:
            raise httpx.ConnectError("exporter is down", request=request)
        return await self.inner.handle_async_request(request)


@dataclass
class PipelineReport:
    trace: ClusterTrace
    tsdb: MockTSDB
    database_path: Path
    timings: dict[str, float] = field(default_factory=lambda: defaultdict(float))
    scrapes: int = 0
    failed_scrapes: int = 0
    parse_errors: int = 0
    roundtrip_mismatches: int = 0
    deletions: int = 0
    failed_deletions: int = 0
    registry_cycles: int = 0
    backups: list[Path] = field(default_factory=list)
    skipped_attributions: int = 0

    @property
    def total_seconds(self) -> float:
        return sum(self.timings.values())


def _exporter_config(trace: ClusterTrace, index: int, root: Path) -> ExporterConfig:
    return ExporterConfig(
        fs_root=root,
        collectors=CollectorToggles(gpumap=trace.nodes[index].gpu_count > 0),
        ipmi=IPMIConfig(source="file"),
    )


def _registry_config(spec: ClusterSpec, out: Path, interval_s: float, backup_s: Optional[float]) -> StackConfig:
    factors = out / "factors.csv"
    factors.write_text(f"region,grams_per_kwh\n{spec.region},{spec.grams_per_kwh!r}\n", encoding="utf-8")
    return StackConfig(
        registry=RegistryConfig(
            database_path=out / "registry.db",
            cluster_id=spec.cluster_id,
            accounting_file=out / "accounting.txt",
            ingest_interval_seconds=interval_s,
            aggregation_interval_seconds=interval_s,
            cutoff_seconds=spec.short_job_cutoff_s,
            backup_interval_seconds=backup_s,
            backup_dir=out / "backups" if backup_s else None,
            tsdb_url=TSDB_URL,
            tsdb_retries=1,
            tsdb_backoff_seconds=0,
        ),
        emissions=EmissionsConfig(region=spec.region, static_table=factors),
    )


def _fresh_store(out: Path) -> None:
    for suffix in ("", "-wal", "-shm"):
        (out / f"registry.db{suffix}").unlink(missing_ok=True)


async def run_pipeline(
    spec: ClusterSpec,
    out_dir: Path | str,
    registry_interval_s: float = 900.0,
    backup_interval_s: Optional[float] = 3600.0,
    down: Optional[dict[str, set[int]]] = None,
    max_workers: int = 8,
) -> PipelineReport:
    """
    Run the simulated day. `down` maps node names to instants at which
    that node's exporter does not answer.
    """
    out = Path(out_dir)
    down = down or {}
    started = time.perf_counter()
    trace = generate_cluster(spec, out, materialize="none")
    tsdb = MockTSDB()
    _fresh_store(out)
    report = PipelineReport(trace, tsdb, out / "registry.db")
    report.timings["generate"] = time.perf_counter() - started

    clock = SimClock(spec.start_ms / 1000)
    roots = [out / "live" / node.name for node in trace.nodes]
    mounts = {}
    switches: dict[str, SwitchableTransport] = {}
    targets = []
    for k, node in enumerate(trace.nodes):
        config = _exporter_config(trace, k, roots[k])
        app = create_exporter_app(StackConfig(exporter=config), NodeExporter.from_config(config, clock))
        switches[node.name] = SwitchableTransport(httpx.ASGITransport(app=app))
        mounts[f"http://{node.name}"] = switches[node.name]
        targets.append(ScrapeTarget(node.name, f"http://{node.name}/metrics"))
    recorder = PowerRecorder(spec.profiles, {node.name: node.group for node in trace.nodes})
    sink = LocalSink(tsdb)

    tsdb_client = httpx.AsyncClient(transport=httpx.ASGITransport(app=create_tsdb_app(tsdb)))
    registry = build_registry(
        _registry_config(spec, out, registry_interval_s, backup_interval_s),
        env=EnvSettings(),
        clock=clock,
        http_client=tsdb_client,
        as_of_ingest=True,
    )

    interval = spec.scrape_interval_s
    last_cycle: Optional[int] = None
    async with httpx.AsyncClient(mounts=mounts) as client:
        for i in range(spec.instant_count):
            now_ms = spec.timestamp(i)
            clock.now = now_ms / 1000
            started = time.perf_counter()
            for k, node in enumerate(trace.nodes):
                trace.write_instant(k, i, roots[k])
                switches[node.name].down = i in down.get(node.name, ())
            cycle = await run_scrape_cycle(targets, client, sink, now_ms, recorder, max_workers)
            elapsed = time.perf_counter() - started
            report.timings["record"] += cycle.record_seconds
            report.timings["scrape"] += elapsed - cycle.record_seconds - cycle.ingest_seconds
            report.timings["ingest"] += cycle.ingest_seconds
            report.scrapes += len(cycle.results)
            report.failed_scrapes += len(cycle.failed)
            report.parse_errors += cycle.parse_errors
            report.roundtrip_mismatches += cycle.roundtrip_mismatches

            boundary = i > 0 and (i * interval) // registry_interval_s > ((i - 1) * interval) // registry_interval_s
            final = i == spec.instant_count - 1
            if boundary or final:
                result = await registry.run_cycle(now_ms, force=final and not boundary)
                last_cycle = now_ms
                report.registry_cycles += 1
                for stage, seconds in result.timings.items():
                    report.timings[stage] += seconds
                report.deletions += sum(d.ok for d in (*result.deletions, *result.retried))
                report.failed_deletions += sum(not d.ok for d in result.deletions)
                if result.backup is not None:
                    report.backups.append(result.backup)
                for error in result.errors:
                    logger.error("❌ Registry cycle at %d: %s", now_ms, error)

    await registry.tsdb.aclose()
    await tsdb_client.aclose()
    registry.engine.dispose()
    report.skipped_attributions = recorder.skipped
    logger.info(
        "✅ Simulated %d instants, %d scrapes, %d registry cycles (last at %s)",
        spec.instant_count, report.scrapes, report.registry_cycles, last_cycle,
    )
    return report
