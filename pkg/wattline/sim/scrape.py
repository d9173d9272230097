"""
Scrape driver: polls exporter endpoints concurrently, parses their
exposition and pushes the samples into a TSDB sink.
"""

import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx
import yaml

from wattline.core.exceptions import ConfigError, ParseError
from wattline.models.metrics import MetricFamily, Sample
from wattline.services.exposition import parse_exposition, render_exposition
from wattline.services.recorder import PowerRecorder
from wattline.sim.tsdb import NAME_LABEL, MockTSDB

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScrapeTarget:
    instance: str
    url: str


def load_targets(path: Path | str) -> list[ScrapeTarget]:
    """YAML list of {instance, url} mappings"""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return [ScrapeTarget(str(item["instance"]), str(item["url"])) for item in data or []]
    except (OSError, yaml.YAMLError, KeyError, TypeError) as e:
        raise ConfigError(f"cannot read scrape targets {path}: {e}") from e


class Sink(Protocol):
    async def push_scrape(self, instance: str, families: list[MetricFamily], timestamp: int) -> int: ...

    async def push_samples(self, samples: list[Sample]) -> int: ...


class LocalSink:
    """Writes straight into an in-process mock TSDB"""

    def __init__(self, tsdb: MockTSDB):
        self.tsdb = tsdb

    async def push_scrape(self, instance: str, families: list[MetricFamily], timestamp: int) -> int:
        return self.tsdb.ingest_families(families, instance, timestamp)

    async def push_samples(self, samples: list[Sample]) -> int:
        return self.tsdb.ingest_samples(samples)


class RemoteSink:
    """Posts samples to a mock TSDB's import endpoint"""

    def __init__(self, client: httpx.AsyncClient, base_url: str):
        self.client = client
        self.base_url = base_url.rstrip("/")

    async def _post(self, items: list[dict]) -> int:
        response = await self.client.post(f"{self.base_url}/api/v1/import", json={"samples": items})
        response.raise_for_status()
        return int(response.json().get("written", 0))

    async def push_scrape(self, instance: str, families: list[MetricFamily], timestamp: int) -> int:
        return await self._post(
            [
                {
                    "labels": {**s.labels.as_dict(), NAME_LABEL: s.metric_name, "instance": instance},
                    "value": s.value,
                    "timestamp": timestamp,
                }
                for fam in families
                for s in fam.samples
            ]
        )

    async def push_samples(self, samples: list[Sample]) -> int:
        return await self._post(
            [
                {
                    "labels": {**s.labels.as_dict(), NAME_LABEL: s.metric_name},
                    "value": s.value,
                    "timestamp": s.timestamp,
                }
                for s in samples
            ]
        )


@dataclass
class ScrapeResult:
    instance: str
    ok: bool
    latency_seconds: float
    samples: int = 0
    parse_errors: int = 0
    roundtrip_mismatch: bool = False
    error: Optional[str] = None
    families: list[MetricFamily] = field(default_factory=list, repr=False)


@dataclass
class ScrapeReport:
    timestamp: int
    results: list[ScrapeResult] = field(default_factory=list)
    record_seconds: float = 0.0
    ingest_seconds: float = 0.0

    @property
    def failed(self) -> list[str]:
        return [r.instance for r in self.results if not r.ok]

    @property
    def parse_errors(self) -> int:
        return sum(r.parse_errors for r in self.results)

    @property
    def roundtrip_mismatches(self) -> int:
        return sum(r.roundtrip_mismatch for r in self.results)

    @property
    def latencies(self) -> list[float]:
        return [r.latency_seconds for r in self.results if r.ok]


async def scrape_target(
    client: httpx.AsyncClient, target: ScrapeTarget, auth: Optional[httpx.Auth] = None
) -> ScrapeResult:
    started = time.perf_counter()
    try:
        response = await client.get(target.url, auth=auth)
        response.raise_for_status()
    except httpx.HTTPError as e:
        return ScrapeResult(target.instance, False, time.perf_counter() - started, error=str(e))
    latency = time.perf_counter() - started
    try:
        families = parse_exposition(response.text)
    except ParseError as e:
        return ScrapeResult(target.instance, False, latency, parse_errors=1, error=str(e))
    return ScrapeResult(
        target.instance,
        True,
        latency,
        samples=sum(len(f.samples) for f in families),
        roundtrip_mismatch=render_exposition(families) != response.text,
        families=families,
    )


async def run_scrape_cycle(
    targets: list[ScrapeTarget],
    client: httpx.AsyncClient,
    sink: Sink,
    timestamp: int,
    recorder: Optional[PowerRecorder] = None,
    max_workers: int = 8,
    auth: Optional[httpx.Auth] = None,
) -> ScrapeReport:
    """
    Poll every target once. A failed target is reported and skipped; the
    rest are ingested in target order by this single writer.
    """
    semaphore = asyncio.Semaphore(max_workers)

    async def bounded(target: ScrapeTarget) -> ScrapeResult:
        async with semaphore:
            return await scrape_target(client, target, auth)

    report = ScrapeReport(timestamp)
    report.results = list(await asyncio.gather(*(bounded(t) for t in targets)))
    for result in report.results:
        if not result.ok:
            logger.warning("⚠️ Scrape of %s failed: %s", result.instance, result.error)
            continue
        started = time.perf_counter()
        await sink.push_scrape(result.instance, result.families, timestamp)
        report.ingest_seconds += time.perf_counter() - started
        if recorder is not None:
            started = time.perf_counter()
            derived = recorder.record(result.instance, result.families, timestamp)
            report.record_seconds += time.perf_counter() - started
            await sink.push_samples(derived)
        result.families = []
    return report


async def scrape_loop(
    targets: list[ScrapeTarget],
    client: httpx.AsyncClient,
    sink: Sink,
    interval_s: float,
    cycles: Optional[int] = None,
    clock: Callable[[], float] = time.time,
) -> int:
    """Scrape every interval_s seconds, stamping samples with wall-clock milliseconds"""
    loop = asyncio.get_running_loop()
    done = 0
    while cycles is None or done < cycles:
        started = loop.time()
        report = await run_scrape_cycle(targets, client, sink, int(clock() * 1000))
        done += 1
        logger.info(
            "🔄 Cycle %d: %d targets, %d failed, %d parse errors",
            done, len(report.results), len(report.failed), report.parse_errors,
        )
        if cycles is None or done < cycles:
            await asyncio.sleep(max(0.0, interval_s - (loop.time() - started)))
    return done
