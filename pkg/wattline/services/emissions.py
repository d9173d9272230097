"""
Emission factors and energy-to-emissions conversion.

Factors come from a static region table or a real-time provider. The
real-time client caches per region for a TTL, suppresses duplicate
in-flight fetches, and falls back to the static table when the provider
fails.
"""

import asyncio
import bisect
import csv
import logging
import math
import time
from pathlib import Path
from typing import Callable, Iterable, Optional

import httpx

from wattline.core.exceptions import (
    ConfigError,
    ContractError,
    EmissionFactorNotFoundError,
    EmissionsUnavailableError,
)
from wattline.models.emissions import EmissionFactor, FactorProvider
from wattline.models.metrics import TimeSeries
from wattline.services.attribution import JOULES_PER_KWH, interval_energy

logger = logging.getLogger(__name__)


class StaticFactorTable:
    """Region → g/kWh table loaded from a `region,grams_per_kwh` file"""

    def __init__(self, factors: dict[str, float], loaded_at_ms: int):
        self.factors = factors
        self.loaded_at_ms = loaded_at_ms

    @classmethod
    def load(cls, path: Path | str, clock: Callable[[], float] = time.time) -> "StaticFactorTable":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read emission factor table {path}: {e}") from e

        reader = csv.reader(text.splitlines())
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["region", "grams_per_kwh"]:
            raise ConfigError(f"{path}: header must be 'region,grams_per_kwh'")
        factors: dict[str, float] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            region, raw = row[0].strip(), row[1].strip()
            if region in factors:
                raise ConfigError(f"{path}:{lineno}: duplicate region {region!r}")
            try:
                value = float(raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: invalid factor {raw!r}") from None
            if not region or not math.isfinite(value) or value < 0:
                raise ConfigError(f"{path}:{lineno}: invalid row {row!r}")
            factors[region] = value
        return cls(factors, int(clock() * 1000))

    def regions(self) -> list[str]:
        return sorted(self.factors)


def static_factor_lookup(region: str, table: StaticFactorTable) -> EmissionFactor:
    try:
        grams = table.factors[region]
    except KeyError:
        raise EmissionFactorNotFoundError(region, table.regions()) from None
    return EmissionFactor(region, grams, table.loaded_at_ms, FactorProvider.STATIC)


class RealtimeFactorClient:
    """
    Client for a provider serving GET <base>/latest?region=<code> →
    {"region": ..., "carbon_intensity": ...}.
    """

    def __init__(
        self,
        base_url: str,
        static_table: Optional[StaticFactorTable] = None,
        ttl_seconds: float = 300.0,
        timeout_seconds: float = 10.0,
        token: str = "",
        clock: Callable[[], float] = time.time,
        http_client: Optional[httpx.AsyncClient] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.static_table = static_table
        self.ttl_seconds = ttl_seconds
        self.timeout_seconds = timeout_seconds
        self.token = token
        self.clock = clock
        self.http_client = http_client
        self.requests_sent = 0
        self._cache: dict[str, tuple[float, EmissionFactor]] = {}
        self._locks: dict[str, asyncio.Lock] = {}

    def _fresh(self, region: str) -> Optional[EmissionFactor]:
        entry = self._cache.get(region)
        if entry is None:
            return None
        fetched_at, factor = entry
        if self.clock() - fetched_at < self.ttl_seconds:
            return factor
        return None

    async def _request(self, region: str) -> EmissionFactor:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        url = f"{self.base_url}/latest"
        self.requests_sent += 1
        if self.http_client is not None:
            response = await self.http_client.get(
                url, params={"region": region}, headers=headers, timeout=self.timeout_seconds
            )
        else:
            async with httpx.AsyncClient() as client:
                response = await client.get(
                    url, params={"region": region}, headers=headers, timeout=self.timeout_seconds
                )
        response.raise_for_status()
        body = response.json()
        intensity = body["carbon_intensity"]
        if isinstance(intensity, bool) or not isinstance(intensity, (int, float)):
            raise ValueError(f"carbon_intensity is not a number: {intensity!r}")
        if body.get("region", region) != region:
            raise ValueError(f"provider answered for region {body.get('region')!r}")
        return EmissionFactor(
            region, float(intensity), int(self.clock() * 1000), FactorProvider.REALTIME
        )

    async def fetch(self, region: str) -> EmissionFactor:
        """Cached real-time factor, falling back to the static table"""
        cached = self._fresh(region)
        if cached is not None:
            return cached
        lock = self._locks.setdefault(region, asyncio.Lock())
        async with lock:
            cached = self._fresh(region)
            if cached is not None:
                return cached
            try:
                factor = await self._request(region)
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as e:
                logger.warning("⚠️ Real-time emission factor for %s unavailable: %s", region, e)
                return self._fallback(region)
            self._cache[region] = (self.clock(), factor)
            logger.debug("Fetched emission factor %s = %s g/kWh", region, factor.grams_per_kwh)
            return factor

    def _fallback(self, region: str) -> EmissionFactor:
        if self.static_table is None:
            raise EmissionsUnavailableError(
                f"no real-time factor for {region} and no static table configured"
            )
        try:
            return static_factor_lookup(region, self.static_table)
        except EmissionFactorNotFoundError as e:
            raise EmissionsUnavailableError(str(e)) from e


async def fetch_realtime_factor(client: RealtimeFactorClient, region: str) -> EmissionFactor:
    return await client.fetch(region)


def compute_emissions(energy_kwh: float, factor: EmissionFactor) -> float:
    if math.isnan(energy_kwh) or math.isinf(energy_kwh) or energy_kwh < 0:
        raise ContractError(f"energy must be finite and non-negative, got {energy_kwh}")
    return energy_kwh * factor.grams_per_kwh


class FactorSchedule:
    """Time-ordered factors; the factor in force at t is the latest one at or before t"""

    def __init__(self, factors: Iterable[EmissionFactor] = ()):
        self.factors = sorted(factors, key=lambda f: f.timestamp)
        self._times = [f.timestamp for f in self.factors]

    def __len__(self) -> int:
        return len(self.factors)

    def add(self, factor: EmissionFactor) -> None:
        index = bisect.bisect_right(self._times, factor.timestamp)
        self._times.insert(index, factor.timestamp)
        self.factors.insert(index, factor)

    def factor_at(self, timestamp: int) -> EmissionFactor:
        if not self.factors:
            raise EmissionsUnavailableError("emission factor schedule is empty")
        index = bisect.bisect_right(self._times, timestamp) - 1
        # before the first recorded factor the earliest one applies
        return self.factors[max(index, 0)]


def emissions_for_series(series: TimeSeries, schedule: FactorSchedule) -> float:
    """Grams for a watts series; each interval uses the factor in force at its start"""
    grams = 0.0
    for start, joules in interval_energy(series):
        grams += compute_emissions(joules / JOULES_PER_KWH, schedule.factor_at(start))
    return grams


class EmissionsService:
    """Resolves the configured region's current factor from whichever provider is set up"""

    def __init__(
        self,
        region: str,
        static_table: Optional[StaticFactorTable] = None,
        realtime: Optional[RealtimeFactorClient] = None,
    ):
        self.region = region
        self.static_table = static_table
        self.realtime = realtime

    @classmethod
    def from_config(cls, config, token: str = "", clock: Callable[[], float] = time.time):
        table = StaticFactorTable.load(config.static_table, clock) if config.static_table else None
        realtime = None
        if config.realtime_url:
            realtime = RealtimeFactorClient(
                config.realtime_url,
                static_table=table,
                ttl_seconds=config.cache_ttl_seconds,
                timeout_seconds=config.request_timeout_seconds,
                token=token,
                clock=clock,
            )
        return cls(config.region, table, realtime)

    async def current(self) -> EmissionFactor:
        if self.realtime is not None:
            return await self.realtime.fetch(self.region)
        if self.static_table is not None:
            return static_factor_lookup(self.region, self.static_table)
        raise EmissionsUnavailableError("no emission factor provider configured")
