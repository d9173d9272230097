import httpx
import pytest

from wattline.core.exceptions import BackendUnavailableError, ContractError
from wattline.services.balancer import BackendPool, Strategy

URLS = ["http://tsdb-a", "http://tsdb-b", "http://tsdb-c"]


def test_round_robin_cycles_through_backends():
    pool = BackendPool(URLS)
    chosen = []
    for _ in range(6):
        with pool.lease() as backend:
            chosen.append(backend.url)
    assert chosen == URLS * 2


def test_round_robin_skips_unhealthy():
    pool = BackendPool(URLS)
    pool.mark(pool.backends[1], False)
    chosen = [pool.select().url for _ in range(4)]
    assert chosen == ["http://tsdb-a", "http://tsdb-c", "http://tsdb-a", "http://tsdb-c"]


def test_least_connection_prefers_idle_backend():
    pool = BackendPool(URLS, strategy="least_connection")
    assert pool.strategy is Strategy.LEAST_CONNECTION
    first = pool.select()
    second = pool.select()
    assert (first.url, second.url) == ("http://tsdb-a", "http://tsdb-b")
    pool.release(first)
    assert pool.select().url == "http://tsdb-a"
    assert [b["in_flight"] for b in pool.snapshot()] == [1, 1, 0]


def test_release_never_goes_negative():
    pool = BackendPool(URLS[:1])
    backend = pool.select()
    pool.release(backend)
    pool.release(backend)
    assert backend.in_flight == 0


def test_no_healthy_backend():
    for strategy in Strategy:
        pool = BackendPool(URLS[:2], strategy)
        for backend in pool.backends:
            pool.mark(backend, False)
        with pytest.raises(BackendUnavailableError):
            pool.select()


def test_empty_pool_is_a_contract_error():
    with pytest.raises(ContractError):
        BackendPool([])


async def test_health_checks_mark_backends():
    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.host == "tsdb-c":
            raise httpx.ConnectError("refused")
        status = 200 if request.url.host == "tsdb-a" else 503
        return httpx.Response(status)

    pool = BackendPool([f"{u}/" for u in URLS])
    async with httpx.AsyncClient(transport=httpx.MockTransport(handler)) as client:
        await pool.check_health(client)
    assert [b["healthy"] for b in pool.snapshot()] == [True, False, False]
    assert pool.snapshot()[0]["url"] == "http://tsdb-a"
