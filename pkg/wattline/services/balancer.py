import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from wattline._compat import StrEnum
from typing import Iterator

import httpx

from wattline.core.exceptions import BackendUnavailableError, ContractError

logger = logging.getLogger(__name__)

HEALTH_PATH = "/-/healthy"


class Strategy(StrEnum):
    ROUND_ROBIN = "round_robin"
    LEAST_CONNECTION = "least_connection"


@dataclass
class Backend:
    url: str
    healthy: bool = True
    in_flight: int = 0


class BackendPool:
    """
    TSDB backends behind the gate. The round-robin cursor and in_flight
    counters are only touched under the pool lock.
    """

    def __init__(self, urls: list[str], strategy: Strategy | str = Strategy.ROUND_ROBIN):
        if not urls:
            raise ContractError("a backend pool needs at least one backend")
        self.backends = [Backend(url.rstrip("/")) for url in urls]
        self.strategy = Strategy(strategy)
        self._cursor = 0
        self._lock = threading.Lock()

    def select(self) -> Backend:
        with self._lock:
            if self.strategy is Strategy.ROUND_ROBIN:
                chosen = self._next_round_robin()
            else:
                healthy = [b for b in self.backends if b.healthy]
                # min() keeps the first of equal candidates, i.e. list order
                chosen = min(healthy, key=lambda b: b.in_flight) if healthy else None
            if chosen is None:
                raise BackendUnavailableError("no healthy TSDB backend")
            chosen.in_flight += 1
            return chosen

    def _next_round_robin(self) -> Backend | None:
        count = len(self.backends)
        for offset in range(count):
            index = (self._cursor + offset) % count
            if self.backends[index].healthy:
                self._cursor = (index + 1) % count
                return self.backends[index]
        return None

    def release(self, backend: Backend) -> None:
        with self._lock:
            if backend.in_flight > 0:
                backend.in_flight -= 1

    @contextmanager
    def lease(self) -> Iterator[Backend]:
        backend = self.select()
        try:
            yield backend
        finally:
            self.release(backend)

    def mark(self, backend: Backend, healthy: bool) -> None:
        with self._lock:
            changed = backend.healthy != healthy
            backend.healthy = healthy
        if changed:
            if healthy:
                logger.info("✅ Backend %s is healthy again", backend.url)
            else:
                logger.warning("⚠️ Backend %s marked unhealthy", backend.url)

    async def check_health(self, client: httpx.AsyncClient, timeout: float = 5.0) -> None:
        """Probe every backend's health endpoint once"""
        for backend in self.backends:
            try:
                response = await client.get(f"{backend.url}{HEALTH_PATH}", timeout=timeout)
                self.mark(backend, response.status_code == 200)
            except httpx.HTTPError:
                self.mark(backend, False)

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [
                {"url": b.url, "healthy": b.healthy, "in_flight": b.in_flight}
                for b in self.backends
            ]
