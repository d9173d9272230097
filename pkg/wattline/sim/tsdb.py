"""
In-memory stand-in for the long-term TSDB.

Stores raw samples per series and answers range reads for plain label
selectors; no expression evaluation. Ingestion goes through one writer
lock; reads hold the same lock and never see half a scrape.
"""

import bisect
import logging
import threading
from urllib.parse import parse_qs
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from fastapi import FastAPI, Request, Response, status
from fastapi.responses import JSONResponse, PlainTextResponse

from wattline.core.exceptions import InspectionError
from wattline.models.metrics import LabelSet, MetricFamily, Sample, TimeSeries
from wattline.services.exposition import format_value
from wattline.services.selectors import Selector, parse_selector
from wattline.sim.generator import load_manifest

logger = logging.getLogger(__name__)

NAME_LABEL = "__name__"
LOOKBACK_MS = 5 * 60 * 1000


@dataclass
class _Series:
    labels: LabelSet
    timestamps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)


class MockTSDB:
    def __init__(self):
        self._series: dict[LabelSet, _Series] = {}
        self._postings: dict[tuple[str, str], set[LabelSet]] = {}
        self._lock = threading.RLock()
        self.requests: Counter[str] = Counter()
        self.deleted_selectors: list[str] = []
        self.duplicates = 0

    # ------------------------------------------------------------------ writes

    def append(self, labels: LabelSet, timestamp: int, value: float) -> bool:
        """Add one point; a point at or before the series head is dropped"""
        with self._lock:
            series = self._series.get(labels)
            if series is None:
                series = self._series[labels] = _Series(labels)
                for pair in labels.pairs:
                    self._postings.setdefault(pair, set()).add(labels)
            if series.timestamps and timestamp <= series.timestamps[-1]:
                self.duplicates += 1
                return False
            series.timestamps.append(timestamp)
            series.values.append(value)
            return True

    def ingest_samples(self, samples: Iterable[Sample], default_timestamp: Optional[int] = None, **extra: str) -> int:
        written = 0
        with self._lock:
            for sample in samples:
                timestamp = sample.timestamp if sample.timestamp is not None else default_timestamp
                if timestamp is None:
                    raise ValueError(f"sample {sample.metric_name} has no timestamp")
                labels = sample.labels.merge(**{NAME_LABEL: sample.metric_name}, **extra)
                written += self.append(labels, timestamp, sample.value)
        return written

    def ingest_families(self, families: Iterable[MetricFamily], instance: str, timestamp: int) -> int:
        """One scrape: every sample gets the instance label and the scrape time"""
        return self.ingest_samples(
            (s for fam in families for s in fam.samples), timestamp, instance=instance
        )

    def delete(self, selector: Selector) -> int:
        with self._lock:
            doomed = [labels for labels in self._candidates(selector) if selector.matches(labels)]
            for labels in doomed:
                del self._series[labels]
                for pair in labels.pairs:
                    self._postings[pair].discard(labels)
            return len(doomed)

    # ------------------------------------------------------------------ reads

    def _candidates(self, selector: Selector) -> list[LabelSet]:
        postings = [
            self._postings.get((m.name, m.value), set())
            for m in selector.all_matchers()
            if m.op == "=" and m.value
        ]
        if not postings:
            return list(self._series)
        smallest = min(postings, key=len)
        return [labels for labels in smallest if all(labels in p for p in postings)]

    def select(self, selector: Selector, start_ms: int, end_ms: int) -> list[TimeSeries]:
        """Raw points in [start, end] of every matching series, by label order"""
        result = []
        with self._lock:
            for labels in sorted(self._candidates(selector), key=lambda ls: ls.pairs):
                if not selector.matches(labels):
                    continue
                series = self._series[labels]
                lo = bisect.bisect_left(series.timestamps, start_ms)
                hi = bisect.bisect_right(series.timestamps, end_ms)
                if lo < hi:
                    points = tuple(zip(series.timestamps[lo:hi], series.values[lo:hi]))
                    result.append(TimeSeries(labels, points))
        return result

    def latest(self, selector: Selector, at_ms: int) -> list[tuple[LabelSet, int, float]]:
        result = []
        with self._lock:
            for labels in sorted(self._candidates(selector), key=lambda ls: ls.pairs):
                if not selector.matches(labels):
                    continue
                series = self._series[labels]
                i = bisect.bisect_right(series.timestamps, at_ms) - 1
                if i >= 0 and at_ms - series.timestamps[i] <= LOOKBACK_MS:
                    result.append((labels, series.timestamps[i], series.values[i]))
        return result

    def head_timestamp(self) -> int:
        with self._lock:
            return max((s.timestamps[-1] for s in self._series.values() if s.timestamps), default=0)

    def series_count(self) -> int:
        with self._lock:
            return len(self._series)

    def point_count(self, selector: Optional[Selector] = None) -> int:
        with self._lock:
            return sum(
                len(s.timestamps)
                for labels, s in self._series.items()
                if selector is None or selector.matches(labels)
            )

    @classmethod
    def from_manifest(cls, path: Path | str) -> "MockTSDB":
        """Seed with the ground-truth per-job series of a generator manifest"""
        manifest = load_manifest(path)
        spec = manifest.spec
        tsdb = cls()
        for job in manifest.jobs:
            labels = LabelSet.of(workload_id=job["uuid"], instance=job["node"])
            start = job["start_instant"]
            for offset, usage in enumerate(job["cpu_usage_usec"]):
                ts = spec.timestamp(start + offset)
                tsdb.append(labels.merge(__name__="wattline_cpu_seconds_total"), ts, usage / 1e6)
                tsdb.append(
                    labels.merge(__name__="wattline_memory_bytes"), ts, float(job["memory_bytes"][offset])
                )
            for offset, watts in enumerate(job["watts"]):
                ts = spec.timestamp(start + offset + 1)
                tsdb.append(labels.merge(__name__="wattline_unit_power_watts"), ts, watts)
        for node in manifest.nodes:
            labels = LabelSet.of(__name__="wattline_node_power_watts", instance=node["node"], source="ipmi_dcmi")
            for i, watts in enumerate(node["ipmi_watts"]):
                tsdb.append(labels, spec.timestamp(i), float(watts))
        logger.info("✅ Loaded %d series from %s", tsdb.series_count(), path)
        return tsdb


# ============================================================================
# HTTP surface
# ============================================================================

def _bad_data(message: str, status_code: int = status.HTTP_422_UNPROCESSABLE_ENTITY) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content={"status": "error", "errorType": "bad_data", "error": message},
    )


def _seconds(value: str) -> int:
    return round(float(value) * 1000)


async def _params(request: Request) -> dict[str, str]:
    params = dict(request.query_params)
    if request.method == "POST":
        body = (await request.body()).decode("utf-8", errors="replace")
        params.update({k: v[-1] for k, v in parse_qs(body, keep_blank_values=True).items()})
    return params


def create_tsdb_app(tsdb: MockTSDB) -> FastAPI:
    app = FastAPI(title="wattline mock TSDB", docs_url=None, redoc_url=None)
    app.state.tsdb = tsdb

    @app.api_route("/api/v1/query_range", methods=["GET", "POST"])
    async def query_range(request: Request):
        tsdb.requests["query_range"] += 1
        params = await _params(request)
        try:
            selector = parse_selector(params.get("query", ""))
            start, end = _seconds(params["start"]), _seconds(params["end"])
        except InspectionError as e:
            return _bad_data(f"unsupported expression: {e}")
        except (KeyError, ValueError) as e:
            return _bad_data(f"invalid parameter: {e}", status.HTTP_400_BAD_REQUEST)
        result = [
            {
                "metric": series.labels.as_dict(),
                "values": [[ts / 1000, format_value(v)] for ts, v in series.points],
            }
            for series in tsdb.select(selector, start, end)
        ]
        return {"status": "success", "data": {"resultType": "matrix", "result": result}}

    @app.api_route("/api/v1/query", methods=["GET", "POST"])
    async def query(request: Request):
        tsdb.requests["query"] += 1
        params = await _params(request)
        try:
            selector = parse_selector(params.get("query", ""))
            at = _seconds(params["time"]) if "time" in params else tsdb.head_timestamp()
        except InspectionError as e:
            return _bad_data(f"unsupported expression: {e}")
        except ValueError as e:
            return _bad_data(f"invalid parameter: {e}", status.HTTP_400_BAD_REQUEST)
        result = [
            {"metric": labels.as_dict(), "value": [ts / 1000, format_value(v)]}
            for labels, ts, v in tsdb.latest(selector, at)
        ]
        return {"status": "success", "data": {"resultType": "vector", "result": result}}

    @app.post("/api/v1/admin/tsdb/delete_series")
    async def delete_series(request: Request):
        tsdb.requests["delete_series"] += 1
        matches = request.query_params.getlist("match[]")
        if not matches:
            return _bad_data("no match[] parameter", status.HTTP_400_BAD_REQUEST)
        try:
            selectors = [parse_selector(m) for m in matches]
        except InspectionError as e:
            return _bad_data(f"unsupported expression: {e}")
        for text, selector in zip(matches, selectors):
            tsdb.deleted_selectors.append(text)
            tsdb.delete(selector)
        return Response(status_code=status.HTTP_204_NO_CONTENT)

    @app.post("/api/v1/import")
    async def import_samples(request: Request):
        """JSON push used by a scrape driver running in another process"""
        tsdb.requests["import"] += 1
        try:
            body = await request.json()
            samples = [
                Sample(
                    item["labels"][NAME_LABEL],
                    LabelSet.from_mapping(
                        {k: v for k, v in item["labels"].items() if k != NAME_LABEL}
                    ),
                    float(item["value"]),
                    int(item["timestamp"]),
                )
                for item in body["samples"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            return _bad_data(f"invalid import body: {e}", status.HTTP_400_BAD_REQUEST)
        return {"status": "success", "written": tsdb.ingest_samples(samples)}

    @app.get("/api/v1/status/requests")
    async def request_counters():
        return dict(tsdb.requests)

    @app.get("/-/healthy", response_class=PlainTextResponse)
    async def healthy():
        return "Healthy"

    return app
