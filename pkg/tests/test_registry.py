import httpx
import pytest
from sqlalchemy import func, select

from wattline.core.config import RegistryConfig, StackConfig
from wattline.core.exceptions import BackupError, TSDBUnavailableError
from wattline.db.database import build_engine, init_db, session_factory
from wattline.db.models import PendingDeletion, Unit, UnitAggregate
from wattline.main import build_registry, create_registry_app
from wattline.models.emissions import EmissionFactor, FactorProvider
from wattline.models.metrics import LabelSet
from wattline.models.workloads import AggregateMetrics, AggregateScope
from wattline.services.emissions import EmissionsService, FactorSchedule, StaticFactorTable
from wattline.services.gate import HTTPOwnershipClient, StoreOwnershipClient
from wattline.services.registry import (
    CPU_SECONDS_METRIC,
    MEMORY_METRIC,
    UNIT_POWER_METRIC,
    Registry,
    SlurmAccountingFile,
    aggregate_scope,
    aggregate_unit,
    build_adapter,
    ingest_workloads,
    ms_to_iso,
    owns_all,
    parse_accounting_line,
    purge_short_workloads,
    restore_snapshot,
    retry_pending_deletions,
    snapshot_backup,
)
from wattline.services.tsdb_client import TSDBClient

from conftest import GIB

T0 = 1_704_067_200_000
HOUR = 3_600_000


def _row(uuid, user, start, end, cpus=4, memory=8 * GIB, project="physics", gpus=""):
    end_text = ms_to_iso(end) if end is not None else "Unknown"
    return f"{uuid}|{user}|{project}|{ms_to_iso(start)}|{end_text}|{cpus}|{memory}|{gpus}"


def _write_accounting(path, *rows):
    path.write_text("uuid|user|project|start|end|alloc_cpus|alloc_mem_bytes|gpus\n" + "\n".join(rows) + "\n")


def _seed(tsdb, uuid, start, end, power=None, cpu_rate=None, memory=None, step=15_000):
    base = LabelSet.of(workload_id=uuid, instance="n1")
    for ts in range(start, end + 1, step):
        if power is not None:
            tsdb.append(base.merge(__name__=UNIT_POWER_METRIC), ts, power)
        if cpu_rate is not None:
            tsdb.append(base.merge(__name__=CPU_SECONDS_METRIC), ts, cpu_rate * (ts - start) / 1000)
        if memory is not None:
            tsdb.append(base.merge(__name__=MEMORY_METRIC), ts, memory)


def _failing_client(status: int = 503, retries: int = 1, sleep=None) -> TSDBClient:
    transport = httpx.MockTransport(lambda request: httpx.Response(status))
    kwargs = {"sleep": sleep} if sleep else {}
    return TSDBClient(
        "http://tsdb", retries=retries, backoff_seconds=0.5,
        http_client=httpx.AsyncClient(transport=transport), **kwargs,
    )


def _count(session, model) -> int:
    return session.scalar(select(func.count()).select_from(model))


@pytest.fixture
def store(registry_config):
    engine = build_engine(registry_config.database_path)
    init_db(engine)
    yield engine, session_factory(engine)
    engine.dispose()


@pytest.fixture
def make_registry(registry_config, tsdb_client, clock):
    engines = []

    def make(config: RegistryConfig = registry_config, tsdb=tsdb_client, emissions=None, **kwargs):
        engine = build_engine(config.database_path)
        init_db(engine)
        engines.append(engine)
        return Registry(
            config, engine, session_factory(engine), tsdb, build_adapter(config), emissions, clock, **kwargs
        )

    yield make
    for engine in engines:
        engine.dispose()


# ============================================================================
# Ingest
# ============================================================================

def test_parse_accounting_line():
    unit = parse_accounting_line(
        "j1|alice|physics|2024-01-01T00:00:00|2024-01-01T02:00:00|4|8589934592|0,1", "c1"
    )
    assert (unit.uuid, unit.user, unit.project, unit.cluster_id) == ("j1", "alice", "physics", "c1")
    assert unit.started_at == T0
    assert unit.ended_at == T0 + 2 * HOUR
    assert unit.gpu_indices == [0, 1]
    assert parse_accounting_line("j2|bob|p|2024-01-01T00:00:00|Unknown|1|1|", "c1").running


@pytest.mark.parametrize(
    "line",
    [
        "j1|alice|physics|2024-01-01T00:00:00|Unknown|4|8",
        "j1||physics|2024-01-01T00:00:00|Unknown|4|8|",
        "j1|alice|physics|yesterday|Unknown|4|8|",
        "j1|alice|physics|2024-01-01T00:00:00|Unknown|four|8|",
        "j1|alice|physics|2024-01-02T00:00:00|2024-01-01T00:00:00|4|8|",
    ],
)
def test_malformed_accounting_lines(line):
    with pytest.raises(ValueError):
        parse_accounting_line(line, "c1")


def test_ingest_is_idempotent(store, accounting_file):
    _, sessions = store
    _write_accounting(
        accounting_file,
        _row("j1", "alice", T0, None),
        _row("j2", "bob", T0, T0 + HOUR),
        "garbage",
    )
    adapter = SlurmAccountingFile(accounting_file, "test")
    with sessions() as session:
        first = ingest_workloads(adapter, session)
        second = ingest_workloads(adapter, session)
        assert (first.upserted, first.errors) == (2, 1)
        assert second.upserted == 2
        assert _count(session, Unit) == 2

    _write_accounting(accounting_file, _row("j1", "alice", T0, T0 + 2 * HOUR))
    with sessions() as session:
        ingest_workloads(adapter, session)
        j1 = session.scalar(select(Unit).where(Unit.uuid == "j1"))
        assert j1.ended_at == T0 + 2 * HOUR
        assert _count(session, Unit) == 2


def test_ingest_as_of_hides_the_future(store, accounting_file):
    _, sessions = store
    _write_accounting(
        accounting_file,
        _row("early", "alice", T0, T0 + 2 * HOUR),
        _row("late", "alice", T0 + 3 * HOUR, T0 + 4 * HOUR),
    )
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session, as_of_ms=T0 + HOUR)
        units = {u.uuid: u.to_model() for u in session.scalars(select(Unit))}
    assert set(units) == {"early"}
    assert units["early"].running


def test_other_resource_managers_are_placeholders(registry_config):
    adapter = build_adapter(registry_config.model_copy(update={"resource_manager": "kubelet"}))
    with pytest.raises(NotImplementedError):
        adapter.read()


# ============================================================================
# Aggregation
# ============================================================================

async def test_aggregate_unit_energy_usage_and_emissions(mock_tsdb, tsdb_client):
    unit = parse_accounting_line(_row("j1", "alice", T0, T0 + 2 * HOUR), "test")
    _seed(mock_tsdb, "j1", T0, T0 + 2 * HOUR, power=216.25, cpu_rate=2.0, memory=2 * GIB)
    schedule = FactorSchedule([EmissionFactor("FR", 32.0, 0, FactorProvider.STATIC)])
    metrics = await aggregate_unit(unit, tsdb_client, schedule)
    assert metrics.total_energy_kwh == pytest.approx(0.4325)
    assert metrics.total_emissions_grams == pytest.approx(13.84)
    assert metrics.total_cpu_time_seconds == pytest.approx(14_400.0)
    assert metrics.avg_cpu_usage_fraction == pytest.approx(0.5)
    assert metrics.avg_memory_usage_fraction == pytest.approx(0.25)
    assert metrics.avg_gpu_usage_fraction is None
    assert not metrics.no_data and not metrics.provisional


async def test_unit_without_series_has_no_data(tsdb_client):
    unit = parse_accounting_line(_row("ghost", "alice", T0, None), "test")
    metrics = await aggregate_unit(unit, tsdb_client, now_ms=T0 + HOUR)
    assert metrics.no_data
    assert metrics.provisional
    assert metrics.total_energy_kwh == 0.0
    assert metrics.window_end == T0 + HOUR


def test_scope_aggregates_sum_units(store, accounting_file):
    _, sessions = store
    _write_accounting(
        accounting_file,
        _row("u1", "alice", T0, T0 + HOUR),
        _row("u2", "alice", T0 + HOUR, T0 + 4 * HOUR, project="chemistry"),
        _row("u3", "bob", T0, T0 + HOUR),
    )
    values = {"u1": (1.0, 0.2), "u2": (2.0, 0.6), "u3": (5.0, 0.9)}
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session)
        for row in session.scalars(select(Unit)):
            energy, fraction = values[row.uuid]
            row.aggregate = UnitAggregate(unit_id=row.id)
            row.aggregate.apply(
                AggregateMetrics(
                    scope=AggregateScope.UNIT, key=row.uuid,
                    window_start=row.started_at, window_end=row.ended_at,
                    total_energy_kwh=energy, avg_cpu_usage_fraction=fraction,
                    total_emissions_grams=energy * 10,
                ),
                final=True,
            )
        session.commit()

        alice = aggregate_scope("user", "alice", T0, T0 + 4 * HOUR, session)
        assert alice.total_energy_kwh == pytest.approx(3.0)
        assert alice.total_emissions_grams == pytest.approx(30.0)
        assert alice.avg_cpu_usage_fraction == pytest.approx((0.2 * 1 + 0.6 * 3) / 4)
        assert not alice.provisional

        first_hour = aggregate_scope(AggregateScope.USER, "alice", T0, T0 + HOUR, session)
        assert first_hour.total_energy_kwh == pytest.approx(1.0)
        assert aggregate_scope("project", "chemistry", T0, T0 + 4 * HOUR, session).total_energy_kwh == 2.0
        assert aggregate_scope("unit", "u3", T0, T0 + HOUR, session, cluster_id="other").total_energy_kwh == 0.0
        assert aggregate_scope("user", "alice", T0, T0, session).total_energy_kwh == 0.0


# ============================================================================
# Retention
# ============================================================================

def _finalize(sessions):
    with sessions() as session:
        for row in session.scalars(select(Unit)):
            row.aggregate = UnitAggregate(unit_id=row.id)
            row.aggregate.apply(
                AggregateMetrics.zero(AggregateScope.UNIT, row.uuid, row.started_at, row.ended_at or row.started_at),
                final=not row.to_model().running,
            )
        session.commit()


async def test_failed_purge_is_queued_and_retried(store, accounting_file, mock_tsdb, tsdb_client):
    _, sessions = store
    _write_accounting(
        accounting_file,
        _row("s1", "alice", T0, T0 + 30_000),
        _row("long", "alice", T0, T0 + HOUR),
        _row("open", "alice", T0, None),
    )
    _seed(mock_tsdb, "s1", T0, T0 + 30_000, power=100.0)
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session)
    _finalize(sessions)

    with sessions() as session:
        failed = await purge_short_workloads(60, session, _failing_client())
        assert [(r.uuid, r.ok, r.selector) for r in failed] == [("s1", False, '{workload_id="s1"}')]
        assert _count(session, PendingDeletion) == 1
        # queued units are not requested twice
        assert await purge_short_workloads(60, session, _failing_client()) == []

    with sessions() as session:
        retried = await retry_pending_deletions(session, tsdb_client)
        assert [r.ok for r in retried] == [True]
        assert _count(session, PendingDeletion) == 0
        assert session.scalar(select(Unit.purged).where(Unit.uuid == "s1"))
    assert mock_tsdb.deleted_selectors == ['{workload_id="s1"}']
    assert mock_tsdb.series_count() == 0


async def test_failed_retry_counts_attempts(store, accounting_file):
    _, sessions = store
    _write_accounting(accounting_file, _row("s1", "alice", T0, T0 + 1000))
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session)
    _finalize(sessions)
    with sessions() as session:
        await purge_short_workloads(60, session, _failing_client())
        await retry_pending_deletions(session, _failing_client())
        pending = session.scalar(select(PendingDeletion))
        assert pending.attempts == 2
        assert "503" in pending.last_error


async def test_zero_cutoff_disables_purge(store):
    _, sessions = store
    with sessions() as session:
        assert await purge_short_workloads(0, session, _failing_client()) == []


# ============================================================================
# Writer cycle
# ============================================================================

async def test_cycle_ingests_aggregates_and_purges(make_registry, accounting_file, mock_tsdb):
    _write_accounting(
        accounting_file,
        _row("j1", "alice", T0, T0 + 2 * HOUR),
        _row("s1", "alice", T0, T0 + 30_000, cpus=1, memory=GIB),
        _row("j3", "bob", T0 + HOUR, None, cpus=2, memory=4 * GIB),
    )
    _seed(mock_tsdb, "j1", T0, T0 + 2 * HOUR, power=216.25, cpu_rate=2.0, memory=2 * GIB)
    _seed(mock_tsdb, "s1", T0, T0 + 30_000, power=100.0, memory=GIB / 2)
    emissions = EmissionsService("FR", StaticFactorTable({"FR": 32.0}, loaded_at_ms=0))
    registry = make_registry(emissions=emissions)

    report = await registry.run_cycle(now_ms=T0 + 3 * HOUR)
    assert report.errors == []
    assert report.ingest.upserted == 3
    assert report.aggregated == 3
    assert [(d.uuid, d.ok) for d in report.deletions] == [("s1", True)]
    assert {"ingest", "aggregate", "purge"} <= set(report.timings)
    assert mock_tsdb.point_count() == 3 * 481

    with registry.sessions() as session:
        j1 = aggregate_scope("unit", "j1", T0, T0 + 3 * HOUR, session)
        assert j1.total_emissions_grams == pytest.approx(13.84)
        j3 = session.scalar(select(Unit).where(Unit.uuid == "j3"))
        assert j3.aggregate.no_data and not j3.aggregate.final
        assert session.scalar(select(Unit.purged).where(Unit.uuid == "s1"))

    # only the running unit is aggregated again
    again = await registry.run_cycle(now_ms=T0 + 3 * HOUR + 900_000)
    assert again.aggregated == 1
    assert again.deletions == []


async def test_cycle_survives_tsdb_outage(make_registry, accounting_file):
    _write_accounting(accounting_file, _row("j1", "alice", T0, T0 + HOUR))
    registry = make_registry(tsdb=_failing_client())
    report = await registry.run_cycle(now_ms=T0 + 2 * HOUR)
    assert report.ingest.upserted == 1
    assert len(report.errors) == 1
    with registry.sessions() as session:
        assert _count(session, UnitAggregate) == 0
    # aggregation was not marked done, so it is due again at once
    assert (await registry.run_cycle(now_ms=T0 + 2 * HOUR + 1)).errors


async def test_daily_backup_count(make_registry, registry_config, tmp_path):
    config = registry_config.model_copy(
        update={"backup_dir": tmp_path / "backups", "backup_interval_seconds": 3600.0}
    )
    registry = make_registry(config=config)
    for k in range(1, 97):
        await registry.run_cycle(now_ms=T0 + k * 900_000)
    assert len(registry.backups) == 24
    assert len(list((tmp_path / "backups").glob("registry-*.db"))) == 24


async def test_tsdb_client_backs_off_between_retries():
    delays = []

    async def sleep(seconds):
        delays.append(seconds)

    client = _failing_client(status=502, retries=3, sleep=sleep)
    with pytest.raises(TSDBUnavailableError):
        await client.query_range('m{workload_id="1"}', 0, 1000)
    assert delays == [0.5, 1.0]

    bad_request = _failing_client(status=400, retries=3, sleep=sleep)
    with pytest.raises(TSDBUnavailableError):
        await bad_request.query_range('m{workload_id="1"}', 0, 1000)
    assert delays == [0.5, 1.0]


# ============================================================================
# Backups
# ============================================================================

def test_snapshot_and_restore(store, accounting_file, tmp_path):
    engine, sessions = store
    _write_accounting(accounting_file, _row("j1", "alice", T0, T0 + HOUR))
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session)
    snapshot = snapshot_backup(engine, tmp_path / "snap.db")

    _write_accounting(accounting_file, _row("j2", "bob", T0, T0 + HOUR))
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session)
        assert _count(session, Unit) == 2

    restored = restore_snapshot(snapshot, tmp_path / "restored.db")
    restored_engine = build_engine(restored)
    with session_factory(restored_engine)() as session:
        assert [u.uuid for u in session.scalars(select(Unit))] == ["j1"]
    restored_engine.dispose()

    with pytest.raises(BackupError):
        restore_snapshot(tmp_path / "missing.db", tmp_path / "out.db")


# ============================================================================
# HTTP API and ownership
# ============================================================================

@pytest.fixture
async def registry_api(registry_config, tsdb_http, accounting_file, clock):
    _write_accounting(
        accounting_file,
        _row("j1", "alice", T0, T0 + HOUR),
        _row("j2", "alice", T0 + HOUR, None, project="chemistry"),
        _row("j3", "bob", T0, T0 + HOUR),
    )
    service = build_registry(StackConfig(registry=registry_config), clock=clock, http_client=tsdb_http)
    await service.run_cycle(now_ms=T0 + 2 * HOUR)
    app = create_registry_app(StackConfig(registry=registry_config), service, run_writer=False)
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://registry") as client:
        yield client
    service.engine.dispose()


async def test_verify_endpoint(registry_api):
    owned = await registry_api.get("/api/v1/verify", params=[("user", "alice"), ("uuid", "j1"), ("uuid", "j2")])
    assert owned.status_code == 200
    assert owned.json()["uuids"] == ["j1", "j2"]
    mixed = await registry_api.get("/api/v1/verify", params=[("user", "alice"), ("uuid", "j1"), ("uuid", "j3")])
    assert mixed.status_code == 403
    unknown = await registry_api.get("/api/v1/verify", params={"user": "alice", "uuid": "nope"})
    assert unknown.status_code == 403
    other_cluster = await registry_api.get(
        "/api/v1/verify", params={"user": "alice", "uuid": "j1", "cluster": "elsewhere"}
    )
    assert other_cluster.status_code == 403


async def test_units_and_usage_endpoints(registry_api):
    units = (await registry_api.get("/api/v1/units", params={"user": "alice"})).json()
    assert units["count"] == 2
    window = (await registry_api.get("/api/v1/units", params={"end": T0 + HOUR})).json()
    assert sorted(u["uuid"] for u in window["units"]) == ["j1", "j3"]

    usage = await registry_api.get("/api/v1/usage/user", params={"key": "alice", "start": T0})
    assert usage.status_code == 200
    body = usage.json()
    assert body["scope"] == "user" and body["no_data"] and body["provisional"]
    assert (await registry_api.get("/api/v1/usage/team", params={"key": "x"})).status_code == 422
    bad_window = await registry_api.get("/api/v1/usage/user", params={"key": "alice", "start": 10, "end": 5})
    assert bad_window.status_code == 400


async def test_gate_ownership_clients_agree_with_registry(registry_api, registry_config):
    http_owner = HTTPOwnershipClient("http://registry", "test", http_client=registry_api)
    store_owner = StoreOwnershipClient(registry_config.database_path, "test")
    for client in (http_owner, store_owner):
        assert await client.owns_all("alice", ["j1", "j2"])
        assert not await client.owns_all("alice", ["j1", "j3"])
        assert not await client.owns_all("bob", ["j1"])
    await store_owner.aclose()


def test_owns_all_needs_user_and_ids(store, accounting_file):
    _, sessions = store
    _write_accounting(accounting_file, _row("j1", "alice", T0, T0 + HOUR))
    with sessions() as session:
        ingest_workloads(SlurmAccountingFile(accounting_file, "test"), session)
        assert owns_all("alice", "test", ["j1"], session)
        assert not owns_all("alice", "test", [], session)
        assert not owns_all("", "test", ["j1"], session)
