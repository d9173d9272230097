"""
Async client for a Prometheus-compatible TSDB: raw range reads for the
registry and the series-delete admin call used by the purge.
"""

import asyncio
import logging
from typing import Any, Awaitable, Callable, Optional

import httpx

from wattline.core.exceptions import TSDBUnavailableError
from wattline.models.metrics import LabelSet, TimeSeries

logger = logging.getLogger(__name__)


def parse_matrix(body: dict[str, Any]) -> list[TimeSeries]:
    """Turn a query_range matrix response into TimeSeries (ms timestamps)"""
    data = body.get("data") or {}
    if body.get("status") != "success" or data.get("resultType") != "matrix":
        raise ValueError(f"unexpected query_range response: {body.get('error') or body}")
    series = []
    for item in data.get("result", []):
        points = [(round(float(ts) * 1000), float(value)) for ts, value in item.get("values", [])]
        series.append(TimeSeries(LabelSet.from_mapping(item.get("metric", {})), tuple(points)))
    return series


class TSDBClient:
    def __init__(
        self,
        base_url: str,
        admin_url: Optional[str] = None,
        retries: int = 3,
        backoff_seconds: float = 1.0,
        timeout_seconds: float = 30.0,
        http_client: Optional[httpx.AsyncClient] = None,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.admin_url = (admin_url or base_url).rstrip("/")
        self.retries = retries
        self.backoff_seconds = backoff_seconds
        self.timeout_seconds = timeout_seconds
        self.sleep = sleep
        self._client = http_client or httpx.AsyncClient(timeout=timeout_seconds)
        self._owns_client = http_client is None

    async def aclose(self) -> None:
        if self._owns_client:
            await self._client.aclose()

    async def query_range(
        self, selector: str, start_ms: int, end_ms: int, step_seconds: float = 15.0
    ) -> list[TimeSeries]:
        """Raw series for a selector, retried with exponential backoff"""
        params = {
            "query": selector,
            "start": f"{start_ms / 1000:.3f}",
            "end": f"{end_ms / 1000:.3f}",
            "step": f"{step_seconds:g}",
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.retries):
            try:
                response = await self._client.get(
                    f"{self.base_url}/api/v1/query_range", params=params
                )
                if response.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"TSDB answered {response.status_code}",
                        request=response.request,
                        response=response,
                    )
                response.raise_for_status()
                try:
                    return parse_matrix(response.json())
                except ValueError as e:
                    raise TSDBUnavailableError(f"TSDB returned an unreadable matrix: {e}") from e
            except (httpx.TransportError, httpx.HTTPStatusError) as e:
                last_error = e
                if isinstance(e, httpx.HTTPStatusError) and e.response.status_code < 500:
                    break
                if attempt + 1 < self.retries:
                    delay = self.backoff_seconds * 2**attempt
                    logger.warning(
                        "⚠️ TSDB query failed (attempt %d/%d), retrying in %.1fs: %s",
                        attempt + 1, self.retries, delay, e,
                    )
                    await self.sleep(delay)
        raise TSDBUnavailableError(f"TSDB query {selector!r} failed: {last_error}")

    async def delete_series(self, selector: str) -> None:
        try:
            response = await self._client.post(
                f"{self.admin_url}/api/v1/admin/tsdb/delete_series",
                params={"match[]": selector},
            )
            response.raise_for_status()
        except httpx.HTTPError as e:
            raise TSDBUnavailableError(f"series delete {selector!r} failed: {e}") from e
