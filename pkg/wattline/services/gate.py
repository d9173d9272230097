"""
Ownership-enforcing proxy logic: inspect the query, check every workload
id against the registry, then forward to a TSDB backend. Denied requests
never reach a backend.
"""

import asyncio
import json
import logging
from dataclasses import dataclass
from wattline._compat import StrEnum
from pathlib import Path
from typing import Iterable, Optional, Protocol

import httpx

from wattline.core.exceptions import RegistryUnavailableError
from wattline.db.database import build_engine, session_factory
from wattline.services.balancer import BackendPool
from wattline.services.registry import owns_all
from wattline.services.selectors import QueryInspection

logger = logging.getLogger(__name__)

USER_HEADER = "X-Grafana-User"
FORWARDED_HEADERS = ("accept", "content-type", "user-agent")
RELAYED_HEADERS = ("content-type",)


class DenyReason(StrEnum):
    MISSING_USER = "missing-user"
    NON_VERIFIABLE = "non-verifiable-matcher"
    NO_WORKLOAD_SELECTOR = "no-workload-selector"
    UNRESTRICTED_SELECTOR = "unrestricted-selector"
    NOT_OWNER = "not-owner"
    REGISTRY_UNAVAILABLE = "registry-unavailable"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[DenyReason] = None

    @property
    def status_code(self) -> int:
        if self.allowed:
            return 200
        return 502 if self.reason is DenyReason.REGISTRY_UNAVAILABLE else 403


ALLOW = Decision(True)


class OwnershipClient(Protocol):
    async def owns_all(self, user: str, uuids: Iterable[str]) -> bool: ...


class HTTPOwnershipClient:
    """Asks the registry's /api/v1/verify endpoint"""

    def __init__(
        self,
        registry_url: str,
        cluster_id: str,
        auth: Optional[tuple[str, str]] = None,
        timeout_seconds: float = 10.0,
        http_client: Optional[httpx.AsyncClient] = None,
    ):
        self.registry_url = registry_url.rstrip("/")
        self.cluster_id = cluster_id
        self.auth = auth
        self._client = http_client or httpx.AsyncClient(timeout=timeout_seconds)

    async def owns_all(self, user: str, uuids: Iterable[str]) -> bool:
        params = [("user", user), ("cluster", self.cluster_id)]
        params += [("uuid", uuid) for uuid in sorted(uuids)]
        try:
            response = await self._client.get(
                f"{self.registry_url}/api/v1/verify",
                params=params,
                auth=self.auth,
            )
        except httpx.HTTPError as e:
            raise RegistryUnavailableError(f"registry unreachable: {e}") from e
        if response.status_code == 200:
            return True
        if response.status_code == 403:
            return False
        raise RegistryUnavailableError(f"registry answered {response.status_code}")

    async def aclose(self) -> None:
        await self._client.aclose()


class StoreOwnershipClient:
    """Reads ownership straight from the registry's database file"""

    def __init__(self, database_path: Path | str, cluster_id: str):
        self.engine = build_engine(database_path)
        self.sessions = session_factory(self.engine)
        self.cluster_id = cluster_id

    def _owns_all(self, user: str, uuids: list[str]) -> bool:
        with self.sessions() as session:
            return owns_all(user, self.cluster_id, uuids, session)

    async def owns_all(self, user: str, uuids: Iterable[str]) -> bool:
        try:
            return await asyncio.to_thread(self._owns_all, user, list(uuids))
        except Exception as e:
            raise RegistryUnavailableError(f"registry store unreadable: {e}") from e

    async def aclose(self) -> None:
        self.engine.dispose()


async def authorize(
    user: Optional[str],
    inspection: QueryInspection,
    client: OwnershipClient,
    allowlist: Iterable[str] = (),
) -> Decision:
    """Deny by default; allow only queries whose every workload is the user's"""
    if not user:
        return Decision(False, DenyReason.MISSING_USER)
    if not inspection.verifiable:
        return Decision(False, DenyReason.NON_VERIFIABLE)
    allowed_names = set(allowlist)
    blocked = [
        s for s in inspection.unrestricted if not (s.names() and s.names() <= allowed_names)
    ]
    if not inspection.workload_ids:
        if blocked or not inspection.selectors:
            return Decision(False, DenyReason.NO_WORKLOAD_SELECTOR)
        return ALLOW
    if blocked:
        return Decision(False, DenyReason.UNRESTRICTED_SELECTOR)
    try:
        owned = await client.owns_all(user, inspection.workload_ids)
    except RegistryUnavailableError as e:
        logger.warning("⚠️ Ownership check failed closed: %s", e)
        return Decision(False, DenyReason.REGISTRY_UNAVAILABLE)
    return ALLOW if owned else Decision(False, DenyReason.NOT_OWNER)


@dataclass
class ProxiedResponse:
    status_code: int
    content: bytes
    headers: dict[str, str]


class BackendProxy:
    """Forwards an authorized request to one backend chosen by the pool"""

    def __init__(self, pool: BackendPool, timeout_seconds: float = 30.0,
                 http_client: Optional[httpx.AsyncClient] = None):
        self.pool = pool
        self.timeout_seconds = timeout_seconds
        self._client = http_client or httpx.AsyncClient()

    async def forward(
        self,
        method: str,
        path: str,
        query_string: bytes,
        body: bytes,
        headers: dict[str, str],
    ) -> ProxiedResponse:
        backend = self.pool.select()
        try:
            url = f"{backend.url}{path}"
            if query_string:
                url = f"{url}?{query_string.decode('latin-1')}"
            forwarded = {k: v for k, v in headers.items() if k.lower() in FORWARDED_HEADERS}
            try:
                response = await self._client.request(
                    method, url, content=body or None, headers=forwarded,
                    timeout=self.timeout_seconds,
                )
            except httpx.TimeoutException:
                logger.warning("⚠️ Backend %s timed out", backend.url)
                return _error_response(504, "backend timeout")
            except httpx.TransportError as e:
                self.pool.mark(backend, False)
                return _error_response(502, f"backend unreachable: {e}")
            relayed = {
                k: v for k, v in response.headers.items() if k.lower() in RELAYED_HEADERS
            }
            return ProxiedResponse(response.status_code, response.content, relayed)
        finally:
            self.pool.release(backend)

    async def broadcast(
        self, method: str, path: str, query_string: bytes
    ) -> list[tuple[str, int]]:
        """Send the same request to every backend, healthy or not"""
        results = []
        for backend in self.pool.backends:
            url = f"{backend.url}{path}"
            if query_string:
                url = f"{url}?{query_string.decode('latin-1')}"
            try:
                response = await self._client.request(method, url, timeout=self.timeout_seconds)
                results.append((backend.url, response.status_code))
            except httpx.HTTPError as e:
                logger.error("❌ Admin request to %s failed: %s", backend.url, e)
                results.append((backend.url, 502))
        return results

    async def aclose(self) -> None:
        await self._client.aclose()


def _error_response(status: int, message: str) -> ProxiedResponse:
    body = json.dumps({"status": "error", "errorType": "gateway", "error": message})
    return ProxiedResponse(status, body.encode(), {"content-type": "application/json"})

