"""
Deterministic synthetic cluster.

Jobs are drawn from a seeded generator and packed onto nodes. Node power
is synthesized forward from job activity, so the power each job should be
attributed is known exactly. Any scrape instant can be written out as a
fixture tree with the layouts the node exporter reads.
"""

import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from wattline.core.config import format_validation_error
from wattline.core.exceptions import ConfigError, GenerationError
from wattline.models.power import HardwareProfile
from wattline.services.collectors import CGROUP_LAYOUTS, POWERCAP_BASE, USER_HZ
from wattline.services.registry import ms_to_iso

logger = logging.getLogger(__name__)

GIB = 1 << 30
PAGE_BYTES = 4096
RAPL_MAX_RANGE_UJ = 262_143_328_850
CPU_CHOICES = (1, 2, 4, 8)
ACCOUNTING_HEADER = "uuid|user|project|start|end|alloc_cpus|alloc_mem_bytes|gpus"

# forward power model
PKG_IDLE_WATTS = 35.0
PKG_WATTS_PER_CORE = 6.0
DRAM_IDLE_WATTS = 4.0
DRAM_WATTS_PER_GIB = 0.35
BOARD_IDLE_WATTS = 90.0
PSU_OVERHEAD = 1.15
GPU_IDLE_WATTS = 30.0
GPU_MAX_WATTS = 300.0


# ============================================================================
# Spec
# ============================================================================

class ClusterSpec(BaseModel):
    """Shape of the simulated cluster and its workload"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    node_count: int = Field(..., ge=1)
    sockets_per_node: int = Field(default=2, ge=1)
    profiles: dict[str, HardwareProfile] = Field(
        default_factory=lambda: {"cpu-dram": HardwareProfile()}, min_length=1
    )
    gpus_per_node: dict[str, int] = Field(default_factory=dict)
    job_rate_per_day: int = Field(..., ge=0)
    mean_job_duration_s: float = Field(default=3600.0, gt=0)
    short_job_fraction: float = Field(default=0.1, ge=0, le=1)
    user_count: int = Field(default=8, ge=1)
    project_count: int = Field(default=3, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    duration_s: int = Field(default=86400, gt=0)
    scrape_interval_s: int = Field(default=15, gt=0)
    short_job_cutoff_s: int = Field(default=60, ge=0)
    cluster_id: str = Field(default="sim", min_length=1)
    cpus_per_node: int = Field(default=32, ge=1)
    memory_per_node_bytes: int = Field(default=128 * GIB, ge=GIB)
    start_ms: int = Field(default=1_704_067_200_000, ge=0)
    region: str = Field(default="FR", min_length=1)
    grams_per_kwh: float = Field(default=32.0, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "ClusterSpec":
        unknown = sorted(set(self.gpus_per_node) - set(self.profiles))
        if unknown:
            raise ValueError(f"gpus_per_node names unknown node groups: {', '.join(unknown)}")
        if any(count < 0 for count in self.gpus_per_node.values()):
            raise ValueError("gpus_per_node values must be >= 0")
        if self.duration_s < self.scrape_interval_s:
            raise ValueError("duration_s must cover at least one scrape interval")
        if self.job_count and self.short_job_fraction > 0:
            if self.short_job_cutoff_s <= self.scrape_interval_s:
                raise ValueError("short_job_cutoff_s must exceed scrape_interval_s to have short jobs")
        if self.job_count and self.short_job_fraction < 1:
            if self.instant_count - 1 < self.min_long_instants:
                raise ValueError("duration_s is too short for jobs longer than the cutoff")
        return self

    @property
    def instant_count(self) -> int:
        return self.duration_s // self.scrape_interval_s + 1

    @property
    def job_count(self) -> int:
        return round(self.job_rate_per_day * self.duration_s / 86400)

    @property
    def max_short_instants(self) -> int:
        return max((self.short_job_cutoff_s - 1) // self.scrape_interval_s, 1)

    @property
    def min_long_instants(self) -> int:
        return max(math.ceil(self.short_job_cutoff_s / self.scrape_interval_s), 1)

    def timestamp(self, instant: int) -> int:
        return self.start_ms + instant * self.scrape_interval_s * 1000

    def node_name(self, index: int) -> str:
        return f"node-{index:03d}"

    def node_group(self, index: int) -> str:
        groups = sorted(self.profiles)
        return groups[index % len(groups)]


def load_cluster_spec(path: Path | str) -> ClusterSpec:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read cluster spec {path}: {e}") from e
    try:
        return ClusterSpec.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


# ============================================================================
# Trace
# ============================================================================

@dataclass
class JobTrace:
    """One job; per-instant arrays cover instants start..end inclusive"""

    uuid: str
    user: str
    project: str
    node: int
    start: int
    end: int
    alloc_cpus: int
    alloc_memory_bytes: int
    gpus: list[int]
    cpu_usage_usec: np.ndarray
    memory_bytes: np.ndarray
    gpu_watts: np.ndarray
    gpu_utilization: np.ndarray
    # instants start+1..end
    watts: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def present(self, instant: int) -> bool:
        return self.start <= instant <= self.end

    def cpu_rate(self, instant: int, interval_s: float) -> float:
        """Cores used over (instant-1, instant], computed the way a scraper sees it"""
        k = instant - self.start
        return (self.cpu_usage_usec[k] / 1e6 - self.cpu_usage_usec[k - 1] / 1e6) / interval_s


@dataclass
class NodeTrace:
    name: str
    group: str
    profile: HardwareProfile
    gpu_count: int
    cpu_ticks: np.ndarray
    idle_ticks: np.ndarray
    memory_total_bytes: int
    memory_used_bytes: np.ndarray
    rapl_package_uj: np.ndarray
    rapl_dram_uj: np.ndarray
    ipmi_watts: np.ndarray
    gpu_watts: np.ndarray
    gpu_utilization: np.ndarray
    rapl_cpu_watts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rapl_dram_watts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    idle_floor_watts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    present: list[list[int]] = field(default_factory=list)


def _rapl_rate(counters: np.ndarray, instant: int, interval_s: float) -> float:
    total = 0.0
    for socket in range(counters.shape[0]):
        delta = float(counters[socket, instant]) - float(counters[socket, instant - 1])
        if delta < 0:
            delta += RAPL_MAX_RANGE_UJ
        total += delta / 1e6 / interval_s
    return total


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


class ClusterTrace:
    """Every job and node series of one simulated run"""

    def __init__(self, spec: ClusterSpec, jobs: list[JobTrace], nodes: list[NodeTrace]):
        self.spec = spec
        self.jobs = jobs
        self.nodes = nodes

    @property
    def short_jobs(self) -> list[JobTrace]:
        cutoff_ms = self.spec.short_job_cutoff_s * 1000
        return [j for j in self.jobs if self.duration_ms(j) < cutoff_ms]

    def duration_ms(self, job: JobTrace) -> int:
        return self.spec.timestamp(job.end) - self.spec.timestamp(job.start)

    # ------------------------------------------------------------------ fixtures

    def write_instant(self, node_index: int, instant: int, root: Path | str) -> Path:
        """Make root look like the node's filesystem at one scrape instant"""
        root = Path(root)
        node = self.nodes[node_index]
        jobs = [self.jobs[j] for j in node.present[instant]]
        try:
            self._write_cgroups(root, jobs, instant)
            self._write_powercap(root, node, instant)
            _write(
                root / "proc/stat",
                f"cpu  {int(node.cpu_ticks[instant])} 0 0 {int(node.idle_ticks[instant])} 0 0 0 0\n",
            )
            total_kb = node.memory_total_bytes // 1024
            available_kb = total_kb - int(node.memory_used_bytes[instant]) // 1024
            _write(
                root / "proc/meminfo",
                f"MemTotal:       {total_kb} kB\n"
                f"MemFree:        {available_kb} kB\n"
                f"MemAvailable:   {available_kb} kB\n",
            )
            _write(
                root / "ipmi/dcmi.txt",
                "\n"
                f"    Instantaneous power reading:                   {int(node.ipmi_watts[instant])} Watts\n"
                "    IPMI timestamp:                           simulated\n"
                "    Power reading state is:                   activated\n",
            )
            if node.gpu_count:
                self._write_gpus(root, node, jobs, instant)
        except OSError as e:
            raise GenerationError(f"cannot write fixtures under {root}: {e}") from e
        return root

    @staticmethod
    def _write_cgroups(root: Path, jobs: list[JobTrace], instant: int) -> None:
        base = root / CGROUP_LAYOUTS["slurm"].base
        wanted = {f"job_{j.uuid}": j for j in jobs}
        if base.is_dir():
            for stale in base.iterdir():
                if stale.name not in wanted:
                    shutil.rmtree(stale)
        base.mkdir(parents=True, exist_ok=True)
        for name, job in wanted.items():
            k = instant - job.start
            usage = int(job.cpu_usage_usec[k])
            _write(base / name / "cpu.stat", f"usage_usec {usage}\nuser_usec {usage}\nsystem_usec 0\n")
            _write(base / name / "memory.current", f"{int(job.memory_bytes[k])}\n")

    def _write_powercap(self, root: Path, node: NodeTrace, instant: int) -> None:
        if not node.profile.rapl_domains:
            return
        base = root / POWERCAP_BASE
        for socket in range(self.spec.sockets_per_node):
            zone = base / f"intel-rapl:{socket}"
            _write(zone / "name", f"package-{socket}\n")
            _write(zone / "energy_uj", f"{int(node.rapl_package_uj[socket, instant])}\n")
            _write(zone / "max_energy_range_uj", f"{RAPL_MAX_RANGE_UJ}\n")
            if node.profile.has_dram:
                sub = zone / f"intel-rapl:{socket}:0"
                _write(sub / "name", "dram\n")
                _write(sub / "energy_uj", f"{int(node.rapl_dram_uj[socket, instant])}\n")
                _write(sub / "max_energy_range_uj", f"{RAPL_MAX_RANGE_UJ}\n")

    @staticmethod
    def _write_gpus(root: Path, node: NodeTrace, jobs: list[JobTrace], instant: int) -> None:
        rows = [
            f"{job.uuid} {gpu} GPU-{node.name}-{gpu}"
            for job in jobs
            for gpu in job.gpus
        ]
        _write(root / "gpu/map", "".join(f"{row}\n" for row in rows))
        _write(
            root / "gpu/power",
            "".join(
                f"{g} {float(node.gpu_watts[g, instant])!r} {float(node.gpu_utilization[g, instant])!r}\n"
                for g in range(node.gpu_count)
            ),
        )

    # ------------------------------------------------------------------ manifest

    def manifest_records(self) -> Iterator[dict]:
        spec = self.spec
        spec_record = spec.model_dump(mode="json")
        for profile in spec_record["profiles"].values():
            profile["rapl_domains"] = sorted(profile["rapl_domains"])
        yield {"kind": "spec", **spec_record}
        for k, node in enumerate(self.nodes):
            yield {
                "kind": "node",
                "node": node.name,
                "group": node.group,
                "ipmi_watts": node.ipmi_watts.tolist(),
                "rapl_cpu_watts": node.rapl_cpu_watts.tolist(),
                "rapl_dram_watts": node.rapl_dram_watts.tolist(),
                "gpu_watts": node.gpu_watts.sum(axis=0).tolist() if node.gpu_count else [],
                "idle_floor_watts": node.idle_floor_watts.tolist(),
                "memory_used_bytes": node.memory_used_bytes.tolist(),
            }
        for job in self.jobs:
            yield {
                "kind": "job",
                "uuid": job.uuid,
                "user": job.user,
                "project": job.project,
                "node": self.nodes[job.node].name,
                "start_instant": job.start,
                "end_instant": job.end,
                "started_at": spec.timestamp(job.start),
                "ended_at": spec.timestamp(job.end),
                "alloc_cpus": job.alloc_cpus,
                "alloc_memory_bytes": job.alloc_memory_bytes,
                "gpu_indices": job.gpus,
                "short": self.duration_ms(job) < spec.short_job_cutoff_s * 1000,
                "cpu_usage_usec": job.cpu_usage_usec.tolist(),
                "memory_bytes": job.memory_bytes.tolist(),
                "watts": job.watts.tolist(),
                "gpu_watts": job.gpu_watts.sum(axis=0)[1:].tolist() if job.gpus else [],
                "gpu_utilization": job.gpu_utilization.mean(axis=0)[1:].tolist() if job.gpus else [],
            }

    def write_manifest(self, path: Path | str) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for record in self.manifest_records():
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")
        return path

    def write_accounting(self, path: Path | str) -> Path:
        path = Path(path)
        lines = [ACCOUNTING_HEADER]
        for job in self.jobs:
            lines.append(
                "|".join(
                    (
                        job.uuid,
                        job.user,
                        job.project,
                        ms_to_iso(self.spec.timestamp(job.start)),
                        ms_to_iso(self.spec.timestamp(job.end)),
                        str(job.alloc_cpus),
                        str(job.alloc_memory_bytes),
                        ",".join(str(g) for g in job.gpus),
                    )
                )
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


# ============================================================================
# Forward model
# ============================================================================

def _draw_jobs(spec: ClusterSpec, rng: np.random.Generator) -> list[JobTrace]:
    n_instants = spec.instant_count
    count = spec.job_count
    interval = spec.scrape_interval_s
    is_short = np.zeros(count, dtype=bool)
    is_short[rng.permutation(count)[: round(count * spec.short_job_fraction)]] = True

    durations = np.empty(count, dtype=np.int64)
    for j in range(count):
        if is_short[j]:
            durations[j] = rng.integers(1, spec.max_short_instants + 1)
        else:
            drawn = round(rng.exponential(spec.mean_job_duration_s / interval))
            durations[j] = max(spec.min_long_instants, drawn)
    durations = np.minimum(durations, n_instants - 1)
    starts = np.array([rng.integers(0, n_instants - d) for d in durations], dtype=np.int64)
    order = np.lexsort((np.arange(count), starts))

    cpu_alloc = np.zeros((spec.node_count, n_instants), dtype=np.int32)
    gpu_busy = {
        k: np.zeros((spec.gpus_per_node.get(spec.node_group(k), 0), n_instants), dtype=bool)
        for k in range(spec.node_count)
    }
    memory_per_cpu = spec.memory_per_node_bytes // spec.cpus_per_node

    jobs = []
    for position, j in enumerate(order):
        start = int(starts[j])
        end = start + int(durations[j])
        window = slice(start, end + 1)
        cpus = min(int(CPU_CHOICES[rng.integers(len(CPU_CHOICES))]), spec.cpus_per_node)
        node = None
        for k in rng.permutation(spec.node_count):
            if cpu_alloc[k, window].max() + cpus <= spec.cpus_per_node:
                node = int(k)
                break
        if node is None:
            node = int(np.argmin(cpu_alloc[:, window].max(axis=1)))
        cpu_alloc[node, window] += cpus

        gpus: list[int] = []
        busy = gpu_busy[node]
        if busy.shape[0] and rng.random() < 0.5:
            want = int(rng.integers(1, min(2, busy.shape[0]) + 1))
            gpus = [g for g in range(busy.shape[0]) if not busy[g, window].any()][:want]
            busy[gpus, window] = True

        d = end - start
        level = rng.uniform(0.2, 1.0)
        rate = cpus * np.clip(level + rng.normal(0.0, 0.05, d), 0.01, 1.0)
        increments = np.rint(rate * interval * 1e6).astype(np.int64)
        usage = np.concatenate(([0], np.cumsum(increments))).astype(np.int64)

        alloc_memory = cpus * memory_per_cpu // PAGE_BYTES * PAGE_BYTES
        memory_level = rng.uniform(0.1, 0.9)
        memory = (
            np.clip(memory_level + rng.normal(0.0, 0.03, d + 1), 0.05, 1.0)
            * alloc_memory
            // PAGE_BYTES
        ).astype(np.int64) * PAGE_BYTES

        gpu_levels = rng.uniform(0.3, 0.95, (len(gpus), 1))
        permille = np.clip(
            np.rint((gpu_levels + rng.normal(0.0, 0.05, (len(gpus), d + 1))) * 1000), 0, 1000
        )
        gpu_util = permille / 1000
        gpu_watts = np.rint(GPU_IDLE_WATTS + gpu_util * (GPU_MAX_WATTS - GPU_IDLE_WATTS))

        jobs.append(
            JobTrace(
                uuid=str(10000 + position),
                user=f"user{int(rng.integers(spec.user_count)):02d}",
                project=f"proj{int(rng.integers(spec.project_count)):02d}",
                node=node,
                start=start,
                end=end,
                alloc_cpus=cpus,
                alloc_memory_bytes=alloc_memory,
                gpus=gpus,
                cpu_usage_usec=usage,
                memory_bytes=memory,
                gpu_watts=gpu_watts,
                gpu_utilization=gpu_util,
            )
        )
    return jobs


def _synthesize_node(
    spec: ClusterSpec, index: int, jobs: list[JobTrace], rng: np.random.Generator
) -> NodeTrace:
    n_instants = spec.instant_count
    interval = spec.scrape_interval_s
    sockets = spec.sockets_per_node
    group = spec.node_group(index)
    profile = spec.profiles[group]
    gpu_count = spec.gpus_per_node.get(group, 0)

    job_usec = np.zeros(n_instants, dtype=np.int64)
    memory_sum = np.zeros(n_instants, dtype=np.int64)
    gpu_watts = np.full((gpu_count, n_instants), GPU_IDLE_WATTS)
    gpu_util = np.zeros((gpu_count, n_instants))
    for job in jobs:
        job_usec[job.start + 1 : job.end + 1] += np.diff(job.cpu_usage_usec)
        memory_sum[job.start : job.end + 1] += job.memory_bytes
        for row, gpu in enumerate(job.gpus):
            gpu_watts[gpu, job.start : job.end + 1] = job.gpu_watts[row]
            gpu_util[gpu, job.start : job.end + 1] = job.gpu_utilization[row]

    # system overhead keeps the node busier than the sum of its jobs
    system_usec = int(round(rng.uniform(0.05, 0.3) * interval * 1e6))
    busy = -(-(job_usec + system_usec) // (1_000_000 // USER_HZ))
    busy[0] = 0
    cpu_ticks = int(rng.integers(10**6, 10**7)) + np.cumsum(busy)
    capacity = spec.cpus_per_node * interval * USER_HZ
    idle = np.maximum(capacity - busy, 0)
    idle[0] = 0
    idle_ticks = int(rng.integers(10**7, 10**8)) + np.cumsum(idle)

    system_memory = int(rng.integers(2 * GIB // PAGE_BYTES, 8 * GIB // PAGE_BYTES)) * PAGE_BYTES
    memory_used = memory_sum + system_memory
    memory_total = max(spec.memory_per_node_bytes, int(memory_used.max()) + GIB) // 1024 * 1024

    busy_cores = busy / USER_HZ / interval
    package_watts = PKG_IDLE_WATTS + PKG_WATTS_PER_CORE * busy_cores / sockets
    dram_watts = DRAM_IDLE_WATTS + DRAM_WATTS_PER_GIB * memory_used / GIB / sockets
    package_inc = np.rint(np.tile(package_watts, (sockets, 1)) * interval * 1e6).astype(np.int64)
    dram_inc = np.rint(np.tile(dram_watts, (sockets, 1)) * interval * 1e6).astype(np.int64)
    package_inc[:, 0] = 0
    dram_inc[:, 0] = 0
    package_offset = rng.integers(0, RAPL_MAX_RANGE_UJ, (sockets, 1))
    dram_offset = rng.integers(0, RAPL_MAX_RANGE_UJ, (sockets, 1))
    rapl_package = (package_offset + np.cumsum(package_inc, axis=1)) % RAPL_MAX_RANGE_UJ
    rapl_dram = (dram_offset + np.cumsum(dram_inc, axis=1)) % RAPL_MAX_RANGE_UJ

    gpu_total = gpu_watts.sum(axis=0) if gpu_count else np.zeros(n_instants)
    cpu_dram_watts = sockets * (package_watts + dram_watts)
    ipmi = np.ceil(
        BOARD_IDLE_WATTS
        + PSU_OVERHEAD * cpu_dram_watts
        + (gpu_total if profile.ipmi_includes_gpu else 0.0)
    ).astype(np.int64)

    return NodeTrace(
        name=spec.node_name(index),
        group=group,
        profile=profile,
        gpu_count=gpu_count,
        cpu_ticks=cpu_ticks,
        idle_ticks=idle_ticks,
        memory_total_bytes=memory_total,
        memory_used_bytes=memory_used,
        rapl_package_uj=rapl_package,
        rapl_dram_uj=rapl_dram,
        ipmi_watts=ipmi,
        gpu_watts=gpu_watts,
        gpu_utilization=gpu_util,
    )


def _attribute_truth(
    spec: ClusterSpec, node: NodeTrace, jobs: list[JobTrace], present: list[list[JobTrace]]
) -> None:
    """Expected per-job watts, written straight from the attribution formula"""
    n_instants = spec.instant_count
    dt = float(spec.scrape_interval_s)
    profile = node.profile
    node.rapl_cpu_watts = np.zeros(n_instants)
    node.rapl_dram_watts = np.zeros(n_instants)
    node.idle_floor_watts = np.zeros(n_instants)
    for job in jobs:
        job.watts = np.zeros(job.end - job.start)

    gpu_total = node.gpu_watts.sum(axis=0) if node.gpu_count else np.zeros(n_instants)
    for i in range(1, n_instants):
        rapl_cpu = _rapl_rate(node.rapl_package_uj, i, dt)
        rapl_dram = _rapl_rate(node.rapl_dram_uj, i, dt)
        node.rapl_cpu_watts[i] = rapl_cpu
        node.rapl_dram_watts[i] = rapl_dram

        p_base = float(node.ipmi_watts[i])
        if profile.ipmi_includes_gpu:
            p_base = max(p_base - float(gpu_total[i]), 0.0)
        # jobs seen by both scrapes of the interval
        running = [job for job in present[i] if job.start < i]
        if not running:
            node.idle_floor_watts[i] = p_base
            continue

        rates = [job.cpu_rate(i, dt) for job in running]
        memory = [float(job.memory_bytes[i - job.start]) for job in running]
        t_node = (float(node.cpu_ticks[i]) / USER_HZ - float(node.cpu_ticks[i - 1]) / USER_HZ) / dt
        t_node = max(t_node, sum(rates))
        m_node = max(float(node.memory_used_bytes[i]), sum(memory))

        p_serviceable = (1.0 - profile.network_fraction - profile.storage_fraction) * p_base
        if profile.has_dram and rapl_cpu + rapl_dram > 0:
            cpu_share = rapl_cpu / (rapl_cpu + rapl_dram)
        else:
            cpu_share = 1.0
        network = profile.network_fraction * p_base / len(running)

        total = 0.0
        for job, rate, mem in zip(running, rates, memory):
            watts = network
            if t_node > 0:
                watts += p_serviceable * cpu_share * rate / t_node
            if m_node > 0:
                watts += p_serviceable * (1.0 - cpu_share) * mem / m_node
            job.watts[i - job.start - 1] = watts
            total += watts
        node.idle_floor_watts[i] = p_base - total


def build_trace(spec: ClusterSpec) -> ClusterTrace:
    """Pure in-memory generation; equal specs give equal traces"""
    rng = np.random.default_rng(spec.seed)
    jobs = _draw_jobs(spec, rng)
    by_node: dict[int, list[int]] = {k: [] for k in range(spec.node_count)}
    for index, job in enumerate(jobs):
        by_node[job.node].append(index)

    nodes = []
    for k in range(spec.node_count):
        node_jobs = [jobs[j] for j in by_node[k]]
        node = _synthesize_node(spec, k, node_jobs, rng)
        node.present = [[] for _ in range(spec.instant_count)]
        for j in by_node[k]:
            for i in range(jobs[j].start, jobs[j].end + 1):
                node.present[i].append(j)
        present = [[jobs[j] for j in indices] for indices in node.present]
        _attribute_truth(spec, node, node_jobs, present)
        nodes.append(node)
    return ClusterTrace(spec, jobs, nodes)


def generate_cluster(
    spec: ClusterSpec,
    out_dir: Path | str,
    materialize: Literal["all", "none"] = "all",
) -> ClusterTrace:
    """
    Writes manifest.jsonl and accounting.txt under out_dir and, with
    materialize="all", one fixture tree per node and instant under
    nodes/<node>/<instant>/.
    """
    out = Path(out_dir)
    trace = build_trace(spec)
    try:
        out.mkdir(parents=True, exist_ok=True)
        trace.write_manifest(out / "manifest.jsonl")
        trace.write_accounting(out / "accounting.txt")
    except OSError as e:
        raise GenerationError(f"cannot write cluster output to {out}: {e}") from e
    if materialize == "all":
        for k, node in enumerate(trace.nodes):
            for i in range(spec.instant_count):
                trace.write_instant(k, i, out / "nodes" / node.name / f"{i:06d}")
    logger.info(
        "✅ Generated %d nodes, %d jobs (%d short) over %d instants into %s",
        spec.node_count, len(trace.jobs), len(trace.short_jobs), spec.instant_count, out,
    )
    return trace


# ============================================================================
# Manifest reading
# ============================================================================

@dataclass
class TraceManifest:
    spec: ClusterSpec
    jobs: list[dict]
    nodes: list[dict]

    @property
    def short_job_count(self) -> int:
        return sum(1 for j in self.jobs if j["short"])


def load_manifest(path: Path | str) -> TraceManifest:
    spec: Optional[ClusterSpec] = None
    jobs: list[dict] = []
    nodes: list[dict] = []
    try:
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                kind = record.pop("kind")
                if kind == "spec":
                    spec = ClusterSpec.model_validate(record)
                elif kind == "job":
                    jobs.append(record)
                elif kind == "node":
                    nodes.append(record)
    except (OSError, ValueError, KeyError) as e:
        raise GenerationError(f"cannot read manifest {path}: {e}") from e
    if spec is None:
        raise GenerationError(f"manifest {path} has no spec record")
    return TraceManifest(spec, jobs, nodes)
