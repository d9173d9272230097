"""
Workload registry: the unified store of compute units and their aggregate
energy, usage and emissions metrics.

A single writer cycle ingests accounting data, aggregates units from raw
TSDB series, purges the series of short workloads and takes punctual
backups. HTTP handlers only read.
"""

import asyncio
import logging
import math
import os
import sqlite3
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from sqlalchemy import and_, or_, select
from sqlalchemy.engine import Engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, sessionmaker

from wattline.core.config import RegistryConfig
from wattline.core.exceptions import (
    BackupError,
    EmissionsUnavailableError,
    IngestError,
    TSDBUnavailableError,
)
from wattline.db.models import EmissionFactorRecord, PendingDeletion, Unit, UnitAggregate
from wattline.models.emissions import EmissionFactor
from wattline.models.metrics import TimeSeries
from wattline.models.workloads import (
    AggregateMetrics,
    AggregateScope,
    DeletionRequest,
    IngestReport,
    ResourceManager,
    WorkloadUnit,
)
from wattline.services.attribution import integrate_energy
from wattline.services.emissions import EmissionsService, FactorSchedule, emissions_for_series
from wattline.services.tsdb_client import TSDBClient

logger = logging.getLogger(__name__)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
OPEN_END_VALUES = {"", "unknown", "none"}
ACCOUNTING_FIELDS = 8

UNIT_POWER_METRIC = "wattline_unit_power_watts"
UNIT_GPU_POWER_METRIC = "wattline_unit_gpu_power_watts"
UNIT_GPU_UTIL_METRIC = "wattline_unit_gpu_utilization_ratio"
CPU_SECONDS_METRIC = "wattline_cpu_seconds_total"
MEMORY_METRIC = "wattline_memory_bytes"


# ============================================================================
# Resource-manager adapters
# ============================================================================

def iso_to_ms(value: str) -> int:
    parsed = datetime.fromisoformat(value.strip())
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return (parsed - EPOCH) // timedelta(milliseconds=1)


def ms_to_iso(value: int) -> str:
    return (EPOCH + timedelta(milliseconds=value)).isoformat(timespec="milliseconds")


def parse_accounting_line(line: str, cluster_id: str) -> WorkloadUnit:
    """`uuid|user|project|start|end|alloc_cpus|alloc_mem_bytes|gpu_csv`"""
    fields = line.rstrip("\n").split("|")
    if len(fields) != ACCOUNTING_FIELDS:
        raise ValueError(f"expected {ACCOUNTING_FIELDS} fields, got {len(fields)}")
    uuid, user, project, start, end, cpus, memory, gpus = (f.strip() for f in fields)
    if not uuid or not user:
        raise ValueError("uuid and user must not be empty")
    started_at = iso_to_ms(start)
    return WorkloadUnit(
        uuid=uuid,
        cluster_id=cluster_id,
        resource_manager=ResourceManager.SLURM,
        user=user,
        project=project,
        created_at=started_at,
        started_at=started_at,
        ended_at=None if end.lower() in OPEN_END_VALUES else iso_to_ms(end),
        alloc_cpus=int(cpus),
        alloc_memory_bytes=int(memory),
        gpu_indices=[int(g) for g in gpus.split(",") if g.strip()],
    )


@dataclass
class AdapterBatch:
    units: list[WorkloadUnit] = field(default_factory=list)
    errors: int = 0


class AccountingSource(Protocol):
    def read(self, as_of_ms: Optional[int] = None) -> AdapterBatch: ...


class SlurmAccountingFile:
    """
    Reads a sacct-style pipe-separated export. With as_of_ms the file is
    seen as it would have been at that time: units not yet started are
    hidden and units ending later are still running.
    """

    def __init__(self, path: Path | str, cluster_id: str):
        self.path = Path(path)
        self.cluster_id = cluster_id

    def read(self, as_of_ms: Optional[int] = None) -> AdapterBatch:
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise IngestError(f"cannot read accounting file {self.path}: {e}") from e
        batch = AdapterBatch()
        for lineno, line in enumerate(lines, start=1):
            if not line.strip() or (lineno == 1 and line.lower().startswith("uuid|")):
                continue
            try:
                unit = parse_accounting_line(line, self.cluster_id)
            except ValueError as e:
                logger.debug("Skipping accounting line %d: %s", lineno, e)
                batch.errors += 1
                continue
            if as_of_ms is not None:
                if unit.started_at > as_of_ms:
                    continue
                if unit.ended_at is not None and unit.ended_at > as_of_ms:
                    unit = unit.model_copy(update={"ended_at": None})
            batch.units.append(unit)
        return batch


class LibvirtAdapter:
    """Placeholder for libvirt-managed VMs"""

    def read(self, as_of_ms: Optional[int] = None) -> AdapterBatch:
        raise NotImplementedError("libvirt adapter is not implemented yet")


class KubeletAdapter:
    """Placeholder for kubelet-managed pods"""

    def read(self, as_of_ms: Optional[int] = None) -> AdapterBatch:
        raise NotImplementedError("kubelet adapter is not implemented yet")


def build_adapter(config: RegistryConfig) -> AccountingSource:
    if config.resource_manager == "libvirt":
        return LibvirtAdapter()
    if config.resource_manager == "kubelet":
        return KubeletAdapter()
    if config.accounting_file is None:
        raise IngestError("slurm adapter needs registry.accounting_file")
    return SlurmAccountingFile(config.accounting_file, config.cluster_id)


def ingest_workloads(
    adapter: AccountingSource, session: Session, as_of_ms: Optional[int] = None
) -> IngestReport:
    """Idempotent upsert keyed on (cluster_id, uuid)"""
    batch = adapter.read(as_of_ms)
    try:
        existing = {
            (row.cluster_id, row.uuid): row
            for row in session.scalars(
                select(Unit).where(Unit.uuid.in_([u.uuid for u in batch.units]))
            )
        } if batch.units else {}
        for unit in batch.units:
            row = existing.get((unit.cluster_id, unit.uuid))
            if row is None:
                row = Unit()
                session.add(row)
                existing[(unit.cluster_id, unit.uuid)] = row
            row.apply(unit)
        session.commit()
    except SQLAlchemyError as e:
        session.rollback()
        raise IngestError(f"store write failed: {e}") from e
    if batch.errors:
        logger.warning("⚠️ Ingest skipped %d malformed accounting rows", batch.errors)
    return IngestReport(upserted=len(batch.units), errors=batch.errors)


# ============================================================================
# Aggregation
# ============================================================================

def unit_selector(metric: str, uuid: str, id_label: str = "workload_id") -> str:
    escaped = uuid.replace("\\", "\\\\").replace('"', '\\"')
    return f'{metric}{{{id_label}="{escaped}"}}'


def _counter_increase(series: TimeSeries) -> float:
    """Increase of a counter series, treating drops as resets"""
    total = 0.0
    values = series.values
    for previous, current in zip(values, values[1:]):
        total += current - previous if current >= previous else current
    return total


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


async def aggregate_unit(
    unit: WorkloadUnit,
    tsdb: TSDBClient,
    schedule: Optional[FactorSchedule] = None,
    now_ms: Optional[int] = None,
    step_seconds: float = 15.0,
) -> AggregateMetrics:
    """Energy, usage and emissions of one unit from its raw series"""
    end = unit.ended_at if unit.ended_at is not None else (
        now_ms if now_ms is not None else int(time.time() * 1000)
    )
    end = max(end, unit.started_at)

    async def fetch(metric: str) -> list[TimeSeries]:
        return await tsdb.query_range(
            unit_selector(metric, unit.uuid), unit.started_at, end, step_seconds
        )

    power, gpu_power, gpu_util, cpu, memory = await asyncio.gather(
        fetch(UNIT_POWER_METRIC),
        fetch(UNIT_GPU_POWER_METRIC),
        fetch(UNIT_GPU_UTIL_METRIC),
        fetch(CPU_SECONDS_METRIC),
        fetch(MEMORY_METRIC),
    )
    if not any(len(s) for s in (*power, *gpu_power, *cpu, *memory)):
        return AggregateMetrics.zero(
            AggregateScope.UNIT, unit.uuid, unit.started_at, end, no_data=True
        ).model_copy(update={"provisional": unit.running})

    energy_kwh = 0.0
    grams = 0.0
    for series in (*power, *gpu_power):
        energy_kwh += integrate_energy(series)[1]
        if schedule is not None and len(schedule):
            grams += emissions_for_series(series, schedule)

    cpu_seconds = math.fsum(_counter_increase(s) for s in cpu)
    wall_seconds = (end - unit.started_at) / 1000
    cpu_fraction = 0.0
    if unit.alloc_cpus > 0 and wall_seconds > 0:
        cpu_fraction = min(cpu_seconds / (unit.alloc_cpus * wall_seconds), 1.0)
    memory_fraction = 0.0
    if unit.alloc_memory_bytes > 0:
        memory_fraction = min(
            math.fsum(_mean(s.values) for s in memory) / unit.alloc_memory_bytes, 1.0
        )
    util_points = [v for s in gpu_util for v in s.values]

    return AggregateMetrics(
        scope=AggregateScope.UNIT,
        key=unit.uuid,
        window_start=unit.started_at,
        window_end=end,
        total_cpu_time_seconds=cpu_seconds,
        avg_cpu_usage_fraction=cpu_fraction,
        avg_memory_usage_fraction=memory_fraction,
        total_energy_kwh=energy_kwh,
        total_emissions_grams=grams,
        avg_gpu_usage_fraction=_mean(util_points) if util_points else None,
        provisional=unit.running,
    )


def aggregate_scope(
    scope: AggregateScope | str,
    key: str,
    window_start: int,
    window_end: int,
    session: Session,
    cluster_id: Optional[str] = None,
) -> AggregateMetrics:
    """
    Sum of the aggregates of every unit of a user or project overlapping
    the window. Usage fractions are weighted by unit duration.
    """
    scope = AggregateScope(scope)
    result = AggregateMetrics.zero(scope, key, window_start, window_end)
    if window_end <= window_start:
        return result

    query = select(UnitAggregate).join(Unit).where(
        Unit.started_at < window_end,
        or_(Unit.ended_at.is_(None), Unit.ended_at > window_start),
    )
    if scope is AggregateScope.UNIT:
        query = query.where(Unit.uuid == key)
    elif scope is AggregateScope.USER:
        query = query.where(Unit.user == key)
    else:
        query = query.where(Unit.project == key)
    if cluster_id is not None:
        query = query.where(Unit.cluster_id == cluster_id)
    aggregates = list(session.scalars(query.order_by(Unit.id)))
    if not aggregates:
        return result

    weights = [max(a.window_end - a.window_start, 0) for a in aggregates]

    def weighted(values: list[float], w: list[int]) -> float:
        denominator = sum(w)
        if denominator == 0:
            return _mean(values)
        return math.fsum(v * wi for v, wi in zip(values, w)) / denominator

    gpu_pairs = [
        (a.avg_gpu_usage_fraction, w)
        for a, w in zip(aggregates, weights)
        if a.avg_gpu_usage_fraction is not None
    ]
    return result.model_copy(
        update={
            "total_cpu_time_seconds": math.fsum(a.total_cpu_time_seconds for a in aggregates),
            "total_energy_kwh": math.fsum(a.total_energy_kwh for a in aggregates),
            "total_emissions_grams": math.fsum(a.total_emissions_grams for a in aggregates),
            "avg_cpu_usage_fraction": weighted(
                [a.avg_cpu_usage_fraction for a in aggregates], weights
            ),
            "avg_memory_usage_fraction": weighted(
                [a.avg_memory_usage_fraction for a in aggregates], weights
            ),
            "avg_gpu_usage_fraction": weighted(
                [v for v, _ in gpu_pairs], [w for _, w in gpu_pairs]
            ) if gpu_pairs else None,
            "no_data": all(a.no_data for a in aggregates),
            "provisional": any(not a.final for a in aggregates),
        }
    )


# ============================================================================
# Retention
# ============================================================================

def _short_unit_filter(cutoff_ms: int):
    return and_(
        Unit.ended_at.is_not(None),
        Unit.purged.is_(False),
        Unit.ended_at - Unit.started_at < cutoff_ms,
        ~Unit.pending_deletions.any(),
    )


async def purge_short_workloads(
    cutoff_seconds: int, session: Session, tsdb: TSDBClient, id_label: str = "workload_id"
) -> list[DeletionRequest]:
    """
    Issue one series delete per ended unit shorter than the cutoff whose
    aggregate is final. Failed requests are queued, never dropped.
    """
    if cutoff_seconds <= 0:
        return []
    units = session.scalars(
        select(Unit)
        .join(UnitAggregate)
        .where(_short_unit_filter(cutoff_seconds * 1000), UnitAggregate.final.is_(True))
        .order_by(Unit.id)
    ).all()
    requests = []
    for unit in units:
        selector = unit_selector("", unit.uuid, id_label)
        try:
            await tsdb.delete_series(selector)
        except TSDBUnavailableError as e:
            logger.warning("⚠️ Queued series delete for %s: %s", unit.uuid, e)
            session.add(PendingDeletion(unit_id=unit.id, selector=selector, last_error=str(e)))
            requests.append(DeletionRequest(uuid=unit.uuid, selector=selector, ok=False, error=str(e)))
            continue
        unit.purged = True
        requests.append(DeletionRequest(uuid=unit.uuid, selector=selector, ok=True))
    session.commit()
    if requests:
        logger.info("🧹 Purged series of %d short workloads", sum(r.ok for r in requests))
    return requests


async def retry_pending_deletions(session: Session, tsdb: TSDBClient) -> list[DeletionRequest]:
    results = []
    for pending in session.scalars(select(PendingDeletion).order_by(PendingDeletion.id)).all():
        uuid = pending.unit.uuid
        try:
            await tsdb.delete_series(pending.selector)
        except TSDBUnavailableError as e:
            pending.attempts += 1
            pending.last_error = str(e)
            results.append(DeletionRequest(uuid=uuid, selector=pending.selector, ok=False, error=str(e)))
            continue
        pending.unit.purged = True
        session.delete(pending)
        results.append(DeletionRequest(uuid=uuid, selector=pending.selector, ok=True))
    session.commit()
    return results


# ============================================================================
# Ownership
# ============================================================================

def ownership(user: str, cluster_id: str, uuid: str, session: Session) -> bool:
    owner = session.scalar(
        select(Unit.user).where(Unit.cluster_id == cluster_id, Unit.uuid == uuid)
    )
    return owner is not None and owner == user


def owns_all(user: str, cluster_id: str, uuids: Iterable[str], session: Session) -> bool:
    wanted = set(uuids)
    if not wanted or not user:
        return False
    rows = session.execute(
        select(Unit.uuid, Unit.user).where(Unit.cluster_id == cluster_id, Unit.uuid.in_(wanted))
    ).all()
    owners = {uuid: owner for uuid, owner in rows}
    return all(owners.get(uuid) == user for uuid in wanted)


# ============================================================================
# Backups
# ============================================================================

def _copy_database(source: sqlite3.Connection, dest: Path) -> None:
    tmp = dest.with_name(dest.name + ".tmp")
    try:
        target = sqlite3.connect(tmp)
        try:
            source.backup(target)
        finally:
            target.close()
        os.replace(tmp, dest)
    except (sqlite3.Error, OSError) as e:
        tmp.unlink(missing_ok=True)
        raise BackupError(f"backup to {dest} failed: {e}") from e


def snapshot_backup(engine: Engine, dest: Path | str) -> Path:
    """Atomic point-in-time copy of the store; the previous file survives failures"""
    dest = Path(dest)
    raw = engine.raw_connection()
    try:
        _copy_database(raw.driver_connection, dest)
    finally:
        raw.close()
    logger.info("💾 Registry snapshot written to %s", dest)
    return dest


def restore_snapshot(snapshot: Path | str, dest: Path | str) -> Path:
    snapshot, dest = Path(snapshot), Path(dest)
    if not snapshot.is_file():
        raise BackupError(f"snapshot {snapshot} does not exist")
    source = sqlite3.connect(snapshot)
    try:
        _copy_database(source, dest)
    finally:
        source.close()
    return dest


# ============================================================================
# Writer cycle
# ============================================================================

def load_schedule(session: Session, region: str) -> FactorSchedule:
    rows = session.scalars(
        select(EmissionFactorRecord).where(EmissionFactorRecord.region == region)
    )
    return FactorSchedule(
        EmissionFactor(r.region, r.grams_per_kwh, r.timestamp, r.provider) for r in rows
    )


def record_factor(session: Session, factor: EmissionFactor) -> None:
    exists = session.scalar(
        select(EmissionFactorRecord.id).where(
            EmissionFactorRecord.region == factor.region,
            EmissionFactorRecord.timestamp == factor.timestamp,
            EmissionFactorRecord.provider == factor.provider.value,
        )
    )
    if exists is None:
        session.add(
            EmissionFactorRecord(
                region=factor.region,
                grams_per_kwh=factor.grams_per_kwh,
                timestamp=factor.timestamp,
                provider=factor.provider.value,
            )
        )
        session.commit()


@dataclass
class CycleReport:
    now_ms: int
    ingest: Optional[IngestReport] = None
    aggregated: int = 0
    deletions: list[DeletionRequest] = field(default_factory=list)
    retried: list[DeletionRequest] = field(default_factory=list)
    backup: Optional[Path] = None
    errors: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


class Registry:
    """Owns the store and runs the single writer cycle"""

    def __init__(
        self,
        config: RegistryConfig,
        engine: Engine,
        sessions: sessionmaker,
        tsdb: TSDBClient,
        adapter: AccountingSource,
        emissions: Optional[EmissionsService] = None,
        clock: Callable[[], float] = time.time,
        as_of_ingest: bool = False,
    ):
        self.config = config
        self.engine = engine
        self.sessions = sessions
        self.tsdb = tsdb
        self.adapter = adapter
        self.emissions = emissions
        self.clock = clock
        self.as_of_ingest = as_of_ingest
        self.backups: list[Path] = []
        self._last_ingest: Optional[int] = None
        self._last_aggregate: Optional[int] = None
        self._last_backup: Optional[int] = None
        self._lock = asyncio.Lock()

    @staticmethod
    def _due(last: Optional[int], interval_seconds: Optional[float], now_ms: int) -> bool:
        if interval_seconds is None:
            return False
        return last is None or now_ms - last >= interval_seconds * 1000

    async def _refresh_factor(self, session: Session) -> FactorSchedule:
        region = self.emissions.region
        try:
            record_factor(session, await self.emissions.current())
        except EmissionsUnavailableError as e:
            logger.warning("⚠️ No emission factor this cycle: %s", e)
        return load_schedule(session, region)

    async def aggregate_pending(self, session: Session, now_ms: int) -> int:
        schedule = await self._refresh_factor(session) if self.emissions else None
        rows = session.scalars(
            select(Unit)
            .outerjoin(UnitAggregate)
            .where(
                Unit.cluster_id == self.config.cluster_id,
                or_(UnitAggregate.unit_id.is_(None), UnitAggregate.final.is_(False)),
            )
            .order_by(Unit.id)
        ).all()
        for row in rows:
            unit = row.to_model()
            metrics = await aggregate_unit(unit, self.tsdb, schedule, now_ms)
            if row.aggregate is None:
                row.aggregate = UnitAggregate(unit_id=row.id)
            row.aggregate.apply(metrics, final=not unit.running)
        session.commit()
        return len(rows)

    async def run_cycle(self, now_ms: Optional[int] = None, force: bool = False) -> CycleReport:
        """One writer pass; force runs ingest and aggregation even when not due"""
        now = now_ms if now_ms is not None else int(self.clock() * 1000)
        report = CycleReport(now_ms=now)
        async with self._lock:
            with self.sessions() as session:
                if force or self._due(self._last_ingest, self.config.ingest_interval_seconds, now):
                    started = time.perf_counter()
                    try:
                        report.ingest = ingest_workloads(
                            self.adapter, session, now if self.as_of_ingest else None
                        )
                        report.timings["ingest"] = time.perf_counter() - started
                        self._last_ingest = now
                    except IngestError as e:
                        logger.error("❌ Ingest failed, retrying next cycle: %s", e)
                        report.errors.append(str(e))
                if force or self._due(self._last_aggregate, self.config.aggregation_interval_seconds, now):
                    started = time.perf_counter()
                    try:
                        report.aggregated = await self.aggregate_pending(session, now)
                        report.timings["aggregate"] = time.perf_counter() - started
                        started = time.perf_counter()
                        report.deletions = await purge_short_workloads(
                            self.config.cutoff_seconds, session, self.tsdb
                        )
                        report.retried = await retry_pending_deletions(session, self.tsdb)
                        report.timings["purge"] = time.perf_counter() - started
                        self._last_aggregate = now
                    except TSDBUnavailableError as e:
                        session.rollback()
                        logger.error("❌ Aggregation failed, retrying next cycle: %s", e)
                        report.errors.append(str(e))
            if self.config.backup_dir is not None and self._due(
                self._last_backup, self.config.backup_interval_seconds, now
            ):
                try:
                    self.config.backup_dir.mkdir(parents=True, exist_ok=True)
                    report.backup = snapshot_backup(
                        self.engine, self.config.backup_dir / f"registry-{now}.db"
                    )
                    self.backups.append(report.backup)
                    self._last_backup = now
                except (BackupError, OSError) as e:
                    logger.error("❌ Backup failed: %s", e)
                    report.errors.append(str(e))
        return report

    async def run_forever(self, stop: asyncio.Event) -> None:
        """Run cycles until stop is set; a cycle in progress always completes"""
        interval = min(
            self.config.ingest_interval_seconds, self.config.aggregation_interval_seconds
        )
        while not stop.is_set():
            await self.run_cycle()
            try:
                await asyncio.wait_for(stop.wait(), timeout=interval)
            except TimeoutError:
                pass
