import os
from pathlib import Path
from typing import Callable, Optional

import httpx
import pytest

from wattline.core.config import RegistryConfig
from wattline.services.tsdb_client import TSDBClient
from wattline.sim.tsdb import MockTSDB, create_tsdb_app

GIB = 1 << 30
SLURM_BASE = "sys/fs/cgroup/system.slice/slurmstepd.scope"
RAPL_MAX = 262_143_328_850
DCMI_TEMPLATE = """
    Instantaneous power reading:                   {watts} Watts
    Minimum during sampling period:                 78 Watts
    Maximum during sampling period:                612 Watts
    IPMI timestamp:                           Mon Jan  1 00:00:00 2024
    Power reading state is:                   activated
"""


class FakeClock:
    """Settable clock in seconds"""

    def __init__(self, now: float = 1_704_067_200.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_node_fixture(
    root: Path,
    jobs: Optional[dict[str, tuple[int, int]]] = None,
    rapl: Optional[dict[str, int]] = None,
    ipmi_watts: Optional[int] = 245,
    busy_ticks: int = 40_000,
    mem_total_kb: int = 64 * 1024 * 1024,
    mem_available_kb: int = 60 * 1024 * 1024,
    gpu_map: str = "",
    gpu_power: str = "",
) -> Path:
    """
    Lay out a node filesystem under root. jobs maps ids to (usage_usec,
    memory bytes); rapl maps zone names like "0" or "0:0" to energy_uj.
    """
    for job_id, (usage, memory) in (jobs or {}).items():
        base = root / SLURM_BASE / f"job_{job_id}"
        _write(base / "cpu.stat", f"usage_usec {usage}\nuser_usec {usage}\nsystem_usec 0\n")
        _write(base / "memory.current", f"{memory}\n")
    for zone, energy in (rapl or {}).items():
        socket, _, sub = zone.partition(":")
        path = root / "sys/class/powercap" / f"intel-rapl:{socket}"
        name = f"package-{socket}"
        if sub:
            path = path / f"intel-rapl:{socket}:{sub}"
            name = "dram"
        _write(path / "name", f"{name}\n")
        _write(path / "energy_uj", f"{energy}\n")
        _write(path / "max_energy_range_uj", f"{RAPL_MAX}\n")
    _write(root / "proc/stat", f"cpu  {busy_ticks} 0 0 900000 0 0 0 0\ncpu0 {busy_ticks} 0 0 900000 0 0 0 0\n")
    _write(
        root / "proc/meminfo",
        f"MemTotal:       {mem_total_kb} kB\nMemFree:        {mem_available_kb} kB\n"
        f"MemAvailable:   {mem_available_kb} kB\n",
    )
    if ipmi_watts is not None:
        _write(root / "ipmi/dcmi.txt", DCMI_TEMPLATE.format(watts=ipmi_watts))
    if gpu_map:
        _write(root / "gpu/map", gpu_map)
    if gpu_power:
        _write(root / "gpu/power", gpu_power)
    return root


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def node_root(tmp_path) -> Callable[..., Path]:
    """Factory: node_root(name="node", **fixture) → populated fs root"""

    def make(name: str = "node", **kwargs) -> Path:
        return write_node_fixture(tmp_path / name, **kwargs)

    return make


@pytest.fixture
def mock_tsdb() -> MockTSDB:
    return MockTSDB()


@pytest.fixture
async def tsdb_http(mock_tsdb):
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=create_tsdb_app(mock_tsdb))) as client:
        yield client


@pytest.fixture
def tsdb_client(tsdb_http) -> TSDBClient:
    return TSDBClient("http://tsdb", retries=1, backoff_seconds=0, http_client=tsdb_http)


@pytest.fixture
def accounting_file(tmp_path) -> Path:
    path = tmp_path / "accounting.txt"
    path.write_text("uuid|user|project|start|end|alloc_cpus|alloc_mem_bytes|gpus\n")
    return path


@pytest.fixture
def registry_config(tmp_path, accounting_file) -> RegistryConfig:
    return RegistryConfig(
        database_path=tmp_path / "registry.db",
        cluster_id="test",
        accounting_file=accounting_file,
        cutoff_seconds=60,
        tsdb_url="http://tsdb",
        tsdb_retries=1,
        tsdb_backoff_seconds=0,
    )


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    for name in list(os.environ):
        if name.startswith("WATTLINE_"):
            monkeypatch.delenv(name)
    # EnvSettings reads .env from the working directory
    monkeypatch.chdir(tmp_path)
