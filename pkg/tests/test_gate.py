import random

import httpx
import pytest

from wattline.core.config import BasicAuthConfig, GateConfig, SharedConfig, StackConfig
from wattline.core.exceptions import RegistryUnavailableError
from wattline.core.security import hash_password
from wattline.main import create_admin_app, create_gate_app
from wattline.models.metrics import LabelSet
from wattline.services.balancer import BackendPool
from wattline.services.gate import (
    USER_HEADER,
    BackendProxy,
    DenyReason,
    HTTPOwnershipClient,
    authorize,
)
from wattline.services.selectors import extract_workload_ids
from wattline.sim.tsdb import MockTSDB, create_tsdb_app

BACKENDS = ["http://tsdb-a", "http://tsdb-b"]
OWNERS = {"alice": {"1", "2"}, "bob": {"3"}}
ALICE = {USER_HEADER: "alice"}


class FakeOwnership:
    def __init__(self, owners=None, fail: bool = False):
        self.owners = owners if owners is not None else OWNERS
        self.fail = fail
        self.calls = 0

    async def owns_all(self, user, uuids):
        self.calls += 1
        if self.fail:
            raise RegistryUnavailableError("registry down")
        return set(uuids) <= self.owners.get(user, set())

    async def aclose(self):
        pass


def _refused(request: httpx.Request) -> httpx.Response:
    raise httpx.ConnectError("connection refused", request=request)


@pytest.fixture
def backends() -> dict[str, MockTSDB]:
    tsdbs = {url: MockTSDB() for url in BACKENDS}
    for tsdb in tsdbs.values():
        for uuid in ("1", "2", "3"):
            tsdb.append(LabelSet.of(__name__="m", workload_id=uuid), 1000, float(uuid))
    return tsdbs


@pytest.fixture
async def backend_client(backends):
    mounts = {url: httpx.ASGITransport(app=create_tsdb_app(tsdb)) for url, tsdb in backends.items()}
    mounts["http://tsdb-down"] = httpx.MockTransport(_refused)
    async with httpx.AsyncClient(mounts=mounts) as client:
        yield client


@pytest.fixture
def make_gate(backend_client):
    """Factory: make_gate(ownership=None, urls=BACKENDS, shared=None, **gate_fields) → client"""

    def make(ownership=None, urls=BACKENDS, shared=None, **gate_fields) -> httpx.AsyncClient:
        config = StackConfig(
            shared=shared or SharedConfig(),
            gate=GateConfig(backends=list(urls), registry_url="http://registry", **gate_fields),
        )
        proxy = BackendProxy(BackendPool(list(urls), config.gate.strategy), http_client=backend_client)
        app = create_gate_app(
            config, ownership=ownership or FakeOwnership(), proxy=proxy, run_health_checks=False
        )
        return httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://gate")

    return make


def _backend_requests(backends) -> int:
    return sum(sum(tsdb.requests.values()) for tsdb in backends.values())


async def test_owned_query_is_forwarded(make_gate, backends):
    gate = make_gate()
    response = await gate.get("/api/v1/query", params={"query": 'm{workload_id="1"}'}, headers=ALICE)
    assert response.status_code == 200
    assert response.headers["content-type"] == "application/json"
    result = response.json()["data"]["result"]
    assert result == [{"metric": {"__name__": "m", "workload_id": "1"}, "value": [1.0, "1"]}]


async def test_queries_rotate_over_backends(make_gate, backends):
    gate = make_gate()
    for _ in range(2):
        await gate.get("/api/v1/query", params={"query": 'm{workload_id="2"}'}, headers=ALICE)
    assert [backends[url].requests["query"] for url in BACKENDS] == [1, 1]


async def test_form_post_is_forwarded_verbatim(make_gate):
    gate = make_gate()
    form = {"query": 'm{workload_id="1"}', "start": "0", "end": "10"}
    response = await gate.post("/api/v1/query_range", data=form, headers=ALICE)
    assert response.status_code == 200
    assert response.json()["data"]["result"][0]["values"] == [[1.0, "1"]]


@pytest.mark.parametrize(
    "headers, query, reason",
    [
        ({}, 'm{workload_id="1"}', DenyReason.MISSING_USER),
        ({USER_HEADER: ""}, 'm{workload_id="1"}', DenyReason.MISSING_USER),
        (ALICE, 'm{workload_id=~"1|2"}', DenyReason.NON_VERIFIABLE),
        (ALICE, 'm{workload_id!="3"}', DenyReason.NON_VERIFIABLE),
        (ALICE, 'm{workload_id=""}', DenyReason.NON_VERIFIABLE),
        (ALICE, "m", DenyReason.NO_WORKLOAD_SELECTOR),
        (ALICE, 'sum(m{instance="n1"})', DenyReason.NO_WORKLOAD_SELECTOR),
        (ALICE, 'm{workload_id="1"} + up', DenyReason.UNRESTRICTED_SELECTOR),
        (ALICE, 'm{workload_id="3"}', DenyReason.NOT_OWNER),
        (ALICE, 'm{workload_id="1"} / m{workload_id="3"}', DenyReason.NOT_OWNER),
        (ALICE, 'm{workload_id="1"} # "\n+ m{workload_id="3"} # "', DenyReason.NOT_OWNER),
        (ALICE, 'm{workload_id="1"} # }\n+ m', DenyReason.UNRESTRICTED_SELECTOR),
        ({USER_HEADER: "mallory"}, 'm{workload_id="1"}', DenyReason.NOT_OWNER),
    ],
)
async def test_denied_queries_never_reach_a_backend(make_gate, backends, headers, query, reason):
    gate = make_gate()
    response = await gate.get("/api/v1/query", params={"query": query}, headers=headers)
    assert response.status_code == 403
    assert response.json() == {"status": "error", "errorType": "forbidden", "reason": reason.value}
    assert _backend_requests(backends) == 0


async def test_registry_outage_fails_closed(make_gate, backends):
    gate = make_gate(ownership=FakeOwnership(fail=True))
    response = await gate.get("/api/v1/query", params={"query": 'm{workload_id="1"}'}, headers=ALICE)
    assert response.status_code == 502
    assert response.json()["reason"] == "registry-unavailable"
    assert _backend_requests(backends) == 0


async def test_allowlisted_metrics_need_no_workload(make_gate, backends):
    gate = make_gate(metric_allowlist=["up"])
    alone = await gate.get("/api/v1/query", params={"query": "up"}, headers=ALICE)
    assert alone.status_code == 200
    assert alone.json()["data"]["result"] == []
    # the mock backend only evaluates plain selectors, so a 422 proves forwarding
    mixed = await gate.get("/api/v1/query", params={"query": 'm{workload_id="1"} + up'}, headers=ALICE)
    assert mixed.status_code == 422
    assert _backend_requests(backends) == 2


@pytest.mark.parametrize(
    "params, data",
    [
        ([], None),
        ([("query", "")], None),
        ([("query", 'm{workload_id="1"}'), ("query", "up")], None),
        ([("query", 'm{workload_id="1"}')], {"query": "up"}),
        ([("query", "m{")], None),
    ],
)
async def test_ambiguous_or_malformed_queries_are_rejected(make_gate, backends, params, data):
    gate = make_gate()
    if data is None:
        response = await gate.get("/api/v1/query", params=params, headers=ALICE)
    else:
        response = await gate.post("/api/v1/query", params=params, data=data, headers=ALICE)
    assert response.status_code == 400
    assert response.json()["errorType"] == "bad_data"
    assert _backend_requests(backends) == 0


async def test_non_form_body_is_rejected(make_gate):
    gate = make_gate()
    response = await gate.post("/api/v1/query", json={"query": 'm{workload_id="1"}'}, headers=ALICE)
    assert response.status_code == 415


async def test_gate_requires_basic_auth(make_gate):
    shared = SharedConfig(basic_auth=BasicAuthConfig(username="grafana", password_hash=hash_password("pw")))
    gate = make_gate(shared=shared)
    params = {"query": 'm{workload_id="1"}'}
    anonymous = await gate.get("/api/v1/query", params=params, headers=ALICE)
    assert anonymous.status_code == 401
    assert anonymous.content == b""
    ok = await gate.get("/api/v1/query", params=params, headers=ALICE, auth=("grafana", "pw"))
    assert ok.status_code == 200


async def test_unreachable_backend_is_marked_and_skipped(make_gate):
    gate = make_gate(urls=["http://tsdb-down", "http://tsdb-a"])
    params = {"query": 'm{workload_id="1"}'}
    first = await gate.get("/api/v1/query", params=params, headers=ALICE)
    assert first.status_code == 502
    second = await gate.get("/api/v1/query", params=params, headers=ALICE)
    assert second.status_code == 200
    pool = (await gate.get("/-/backends")).json()["backends"]
    assert [(b["url"], b["healthy"], b["in_flight"]) for b in pool] == [
        ("http://tsdb-down", False, 0),
        ("http://tsdb-a", True, 0),
    ]


async def test_admin_delete_reaches_every_backend(backend_client, backends):
    app = create_admin_app(BackendProxy(BackendPool(BACKENDS), http_client=backend_client))
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://admin") as admin:
        response = await admin.post(
            "/api/v1/admin/tsdb/delete_series", params={"match[]": 'm{workload_id="1"}'}
        )
    assert response.status_code == 204
    assert [tsdb.series_count() for tsdb in backends.values()] == [2, 2]


async def test_admin_delete_reports_failed_backends(backend_client):
    pool = BackendPool(["http://tsdb-a", "http://tsdb-down"])
    app = create_admin_app(BackendProxy(pool, http_client=backend_client))
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://admin") as admin:
        response = await admin.post(
            "/api/v1/admin/tsdb/delete_series", params={"match[]": 'm{workload_id="1"}'}
        )
    assert response.status_code == 502
    assert response.json()["failed_backends"] == ["http://tsdb-down"]


async def test_query_without_selectors_is_denied():
    decision = await authorize("alice", extract_workload_ids("1 + 1"), FakeOwnership())
    assert not decision.allowed
    assert decision.reason is DenyReason.NO_WORKLOAD_SELECTOR


async def test_http_ownership_client():
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request.url.params.multi_items())
        user = request.url.params["user"]
        return httpx.Response({"alice": 200, "bob": 403}.get(user, 500))

    client = HTTPOwnershipClient(
        "http://registry/", "c1", http_client=httpx.AsyncClient(transport=httpx.MockTransport(handler))
    )
    assert await client.owns_all("alice", ["2", "1"])
    assert not await client.owns_all("bob", ["1"])
    with pytest.raises(RegistryUnavailableError):
        await client.owns_all("carol", ["1"])
    assert seen[0] == [("user", "alice"), ("cluster", "c1"), ("uuid", "1"), ("uuid", "2")]


def _random_query(rng: random.Random) -> tuple[str, bool, set[str]]:
    """Returns the query, whether every selector pins ids by equality, and the ids"""
    parts = []
    ids: set[str] = set()
    verifiable = True
    for _ in range(rng.randint(1, 3)):
        metric = rng.choice(["m", "wattline_unit_power_watts", "rate(wattline_cpu_seconds_total"])
        uuid = rng.choice(["1", "2", "3", "4"])
        kind = rng.choices(["eq", "re", "ne", "empty", "none"], weights=[70, 8, 8, 4, 10])[0]
        matcher = {
            "eq": f'workload_id="{uuid}"',
            "re": f'workload_id=~"{uuid}.*"',
            "ne": f'workload_id!="{uuid}"',
            "empty": 'workload_id=""',
            "none": 'instance="n1"',
        }[kind]
        if kind == "eq":
            ids.add(uuid)
        else:
            verifiable = False
        selector = f"{metric}{{{matcher}}}"
        if metric.startswith("rate("):
            selector += "[5m])"
        parts.append(selector)
    query = rng.choice([" + ", " / ", " and ", ' # "\n+ ', " # }\n/ "]).join(parts)
    if rng.random() < 0.3:
        query = f"sum by (instance) ({query})"
    if rng.random() < 0.2:
        query += rng.choice([' # "', " # {", ' # m{workload_id="3"}'])
    return query, verifiable, ids


@pytest.mark.slow
async def test_random_queries_never_leak_foreign_workloads(make_gate, backends):
    rng = random.Random(20240101)
    gate = make_gate()
    forwarded = 0
    for _ in range(10_000):
        query, verifiable, ids = _random_query(rng)
        user = rng.choice(["alice", "bob", None])
        headers = {USER_HEADER: user} if user else {}
        response = await gate.get("/api/v1/query", params={"query": query}, headers=headers)
        expected = bool(user) and verifiable and ids <= OWNERS.get(user, set())
        assert (response.status_code != 403) == expected, query
        forwarded += expected
    assert _backend_requests(backends) == forwarded
