"""
Readers for the node-level sources: cgroup v2 accounting, powercap RAPL
counters, IPMI-DCMI node power, GPU maps and /proc node totals.

Every reader is rooted at a filesystem prefix so fixture trees and the
real root can be used interchangeably.
"""

import logging
import os
import re
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

from wattline.core.exceptions import CollectionError, ContractError
from wattline.models.node import (
    Collected,
    EnergyCounter,
    GpuMapEntry,
    GpuPowerEntry,
    NodePowerReading,
    NodeTotals,
    UsageSample,
)
from wattline.models.power import RaplDomain

logger = logging.getLogger(__name__)

USER_HZ = 100
POWERCAP_BASE = "sys/class/powercap"
DCMI_POWER_RE = re.compile(r"Instantaneous power reading:\s+(\d+)\s+Watts")
RAPL_ZONE_RE = re.compile(r"^intel-rapl:(\d+)(?::(\d+))?$")


def _now_ms() -> int:
    return int(time.time() * 1000)


# ============================================================================
# cgroup v2 accounting
# ============================================================================

@dataclass(frozen=True)
class CgroupLayout:
    """Where a resource manager puts its workload cgroups"""

    base: str
    pattern: re.Pattern


CGROUP_LAYOUTS: dict[str, CgroupLayout] = {
    "slurm": CgroupLayout(
        base="sys/fs/cgroup/system.slice/slurmstepd.scope",
        pattern=re.compile(r"^job_(\d+)$"),
    ),
}


def _read_usage_usec(path: Path) -> int:
    for line in path.read_text().splitlines():
        key, _, value = line.partition(" ")
        if key == "usage_usec":
            return int(value)
    raise ValueError(f"no usage_usec line in {path}")


def collect_cgroup_usage(
    fs_root: Path | str, layout: str = "slurm", now_ms: Optional[int] = None
) -> Collected[UsageSample]:
    """One UsageSample per workload cgroup; unreadable workloads are skipped"""
    root = Path(fs_root)
    if not root.is_dir():
        raise CollectionError(f"fs root {root} does not exist")
    spec = CGROUP_LAYOUTS.get(layout)
    if spec is None:
        raise CollectionError(f"unknown cgroup layout {layout!r}")
    base = root / spec.base
    timestamp = now_ms if now_ms is not None else _now_ms()
    result: Collected[UsageSample] = Collected()
    if not base.is_dir():
        return result

    with os.scandir(base) as entries:
        names = sorted(entry.name for entry in entries if entry.is_dir())
    for name in names:
        match = spec.pattern.match(name)
        if not match:
            continue
        workload_dir = base / name
        try:
            usage_usec = _read_usage_usec(workload_dir / "cpu.stat")
            memory = int((workload_dir / "memory.current").read_text().strip())
        except (OSError, ValueError) as e:
            logger.debug("Skipping workload %s: %s", match.group(1), e)
            result.skipped += 1
            continue
        result.items.append(
            UsageSample(
                workload_id=match.group(1),
                cpu_time_seconds=usage_usec / 1e6,
                memory_bytes=float(memory),
                timestamp=timestamp,
            )
        )
    if result.skipped:
        logger.warning("⚠️ Skipped %d unreadable workload cgroups", result.skipped)
    return result


# ============================================================================
# RAPL powercap counters
# ============================================================================

def _rapl_domain(zone: Path, sub_index: Optional[str]) -> Optional[RaplDomain]:
    try:
        name = (zone / "name").read_text().strip()
    except OSError:
        name = ""
    if sub_index is None:
        return RaplDomain.CPU_PACKAGE if not name or name.startswith("package") else None
    return RaplDomain.DRAM if name == "dram" else None


def read_energy_counters(
    fs_root: Path | str, now_ms: Optional[int] = None
) -> Collected[EnergyCounter]:
    """
    One EnergyCounter per package and dram zone.
    A missing powercap tree is legal: the result is empty and unavailable.
    """
    base = Path(fs_root) / POWERCAP_BASE
    timestamp = now_ms if now_ms is not None else _now_ms()
    result: Collected[EnergyCounter] = Collected()
    if not base.is_dir():
        result.available = False
        return result

    zones: dict[str, Path] = {}
    for top in sorted(base.iterdir()):
        if RAPL_ZONE_RE.match(top.name):
            zones.setdefault(top.name, top)
            if top.is_dir():
                for nested in sorted(top.iterdir()):
                    if RAPL_ZONE_RE.match(nested.name):
                        zones.setdefault(nested.name, nested)

    seen: set[tuple[RaplDomain, int]] = set()
    for zone_name, zone in sorted(zones.items()):
        match = RAPL_ZONE_RE.match(zone_name)
        socket = int(match.group(1))
        domain = _rapl_domain(zone, match.group(2))
        if domain is None or (domain, socket) in seen:
            continue
        try:
            energy = int((zone / "energy_uj").read_text().strip())
            max_range = int((zone / "max_energy_range_uj").read_text().strip())
            counter = EnergyCounter(domain, socket, float(energy), float(max_range), timestamp)
        except (OSError, ValueError) as e:
            logger.debug("Skipping RAPL zone %s: %s", zone_name, e)
            result.skipped += 1
            continue
        seen.add((domain, socket))
        result.items.append(counter)
    result.items.sort(key=lambda c: (c.domain.value, c.socket_index))
    return result


def counter_delta(prev: EnergyCounter, curr: EnergyCounter) -> float:
    """Energy between two readings in µJ, assuming at most one wrap"""
    if prev.domain != curr.domain or prev.socket_index != curr.socket_index:
        raise ContractError(
            f"counter mismatch: {prev.domain}/{prev.socket_index} vs {curr.domain}/{curr.socket_index}"
        )
    if curr.timestamp < prev.timestamp:
        raise ContractError("current reading is older than previous reading")
    delta = curr.energy_microjoules - prev.energy_microjoules
    if delta < 0:
        delta += curr.max_range_microjoules
    return delta


# ============================================================================
# IPMI-DCMI node power
# ============================================================================

class PowerReadingSource(Protocol):
    def read_text(self) -> str: ...


class CommandPowerSource:
    """Runs the configured command (ipmitool dcmi power reading by default)"""

    def __init__(self, command: list[str], timeout: float = 5.0):
        self.command = command
        self.timeout = timeout

    def read_text(self) -> str:
        try:
            completed = subprocess.run(
                self.command,
                capture_output=True,
                text=True,
                timeout=self.timeout,
                check=True,
            )
        except (OSError, subprocess.SubprocessError) as e:
            raise CollectionError(f"IPMI command failed: {e}") from e
        return completed.stdout


class FilePowerSource:
    """Replays a captured command output from a file"""

    def __init__(self, path: Path | str):
        self.path = Path(path)

    def read_text(self) -> str:
        try:
            return self.path.read_text()
        except OSError as e:
            raise CollectionError(f"cannot read IPMI replay file {self.path}: {e}") from e


def parse_dcmi_power(text: str) -> Optional[float]:
    match = DCMI_POWER_RE.search(text)
    return float(match.group(1)) if match else None


class IPMIReader:
    """
    Rate-limited node power reader. The source is invoked at most once per
    min_interval; readings in between are served from cache.
    """

    def __init__(self, min_interval_seconds: float = 10.0, clock: Callable[[], float] = time.time):
        self.min_interval_seconds = min_interval_seconds
        self.clock = clock
        self.invocations = 0
        self._last_attempt: Optional[float] = None
        self._cached: Optional[NodePowerReading] = None
        self._lock = threading.Lock()

    def read(self, source: PowerReadingSource) -> Optional[NodePowerReading]:
        with self._lock:
            now = self.clock()
            if (
                self._last_attempt is not None
                and now - self._last_attempt < self.min_interval_seconds
            ):
                return self._cached
            self._last_attempt = now
            self.invocations += 1
            try:
                watts = parse_dcmi_power(source.read_text())
            except CollectionError as e:
                logger.warning("⚠️ %s", e)
                watts = None
            if watts is None:
                logger.warning("⚠️ No instantaneous power reading available")
                self._cached = None
            else:
                self._cached = NodePowerReading(watts=watts, timestamp=int(now * 1000))
            return self._cached


def read_node_power(source: PowerReadingSource, reader: IPMIReader) -> Optional[NodePowerReading]:
    return reader.read(source)


# ============================================================================
# GPU maps
# ============================================================================

def collect_gpu_map(path: Path | str) -> Collected[GpuMapEntry]:
    """Rows of `workload_id gpu_index gpu_uuid`; malformed and duplicate rows are skipped"""
    result: Collected[GpuMapEntry] = Collected()
    path = Path(path)
    if not path.is_file():
        return result
    seen: set[tuple[str, int]] = set()
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        fields = line.split()
        try:
            if len(fields) != 3:
                raise ValueError(line)
            index = int(fields[1])
            if index < 0:
                raise ValueError(line)
        except ValueError:
            result.skipped += 1
            continue
        key = (fields[0], index)
        if key in seen:
            result.skipped += 1
            continue
        seen.add(key)
        result.items.append(GpuMapEntry(fields[0], index, fields[2]))
    if result.skipped:
        logger.warning("⚠️ Skipped %d GPU map rows in %s", result.skipped, path)
    return result


def read_gpu_power(path: Path | str) -> Collected[GpuPowerEntry]:
    """Rows of `gpu_index watts utilization` as written by a GPU exporter fixture"""
    result: Collected[GpuPowerEntry] = Collected()
    path = Path(path)
    if not path.is_file():
        return result
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            index, watts, utilization = line.split()
            result.items.append(GpuPowerEntry(int(index), float(watts), float(utilization)))
        except ValueError:
            result.skipped += 1
    return result


# ============================================================================
# Node totals from /proc
# ============================================================================

def read_node_totals(fs_root: Path | str, now_ms: Optional[int] = None) -> NodeTotals:
    """Busy CPU seconds from proc/stat and used memory from proc/meminfo"""
    root = Path(fs_root)
    try:
        stat_lines = (root / "proc/stat").read_text().splitlines()
        meminfo = (root / "proc/meminfo").read_text().splitlines()
    except OSError as e:
        raise CollectionError(f"cannot read node totals: {e}") from e

    cpu_line = next((line for line in stat_lines if line.startswith("cpu ")), None)
    if cpu_line is None:
        raise CollectionError("proc/stat has no aggregate cpu line")
    ticks = [int(v) for v in cpu_line.split()[1:]]
    ticks += [0] * (8 - len(ticks))
    user, nice, system, _idle, _iowait, irq, softirq, steal = ticks[:8]
    busy = user + nice + system + irq + softirq + steal

    memory: dict[str, int] = {}
    for line in meminfo:
        key, _, rest = line.partition(":")
        parts = rest.split()
        if parts:
            memory[key] = int(parts[0]) * 1024
    if "MemTotal" not in memory or "MemAvailable" not in memory:
        raise CollectionError("proc/meminfo lacks MemTotal or MemAvailable")

    return NodeTotals(
        cpu_seconds=busy / USER_HZ,
        memory_bytes=float(memory["MemTotal"] - memory["MemAvailable"]),
        timestamp=now_ms if now_ms is not None else _now_ms(),
    )
