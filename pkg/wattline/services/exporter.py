import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from wattline.core.config import ExporterConfig
from wattline.models.metrics import MetricFamily, MetricKind, family
from wattline.services.collectors import (
    CommandPowerSource,
    FilePowerSource,
    IPMIReader,
    PowerReadingSource,
    collect_cgroup_usage,
    collect_gpu_map,
    read_energy_counters,
    read_gpu_power,
    read_node_totals,
)

logger = logging.getLogger(__name__)

PREFIX = "wattline"


@dataclass(frozen=True)
class ScrapeContext:
    fs_root: Path
    now_ms: int


class Collector(ABC):
    """One source of families; a failing collector never aborts the scrape"""

    name: str

    @abstractmethod
    def collect(self, ctx: ScrapeContext) -> list[MetricFamily]: ...

    def success_family(self, ok: bool) -> MetricFamily:
        return family(
            f"{PREFIX}_{self.name}_collector_success",
            MetricKind.GAUGE,
            f"Whether the {self.name} collector succeeded",
            [({}, 1.0 if ok else 0.0)],
        )


class CgroupCollector(Collector):
    name = "cgroup"

    def __init__(self, layout: str = "slurm"):
        self.layout = layout

    def collect(self, ctx: ScrapeContext) -> list[MetricFamily]:
        usage = collect_cgroup_usage(ctx.fs_root, self.layout, ctx.now_ms).items
        return [
            family(
                f"{PREFIX}_cpu_seconds_total",
                MetricKind.COUNTER,
                "Cumulative CPU time of the workload cgroup in seconds",
                [({"workload_id": u.workload_id}, u.cpu_time_seconds) for u in usage],
            ),
            family(
                f"{PREFIX}_memory_bytes",
                MetricKind.GAUGE,
                "Current memory usage of the workload cgroup in bytes",
                [({"workload_id": u.workload_id}, u.memory_bytes) for u in usage],
            ),
        ]


class NodeCollector(Collector):
    name = "node"

    def collect(self, ctx: ScrapeContext) -> list[MetricFamily]:
        totals = read_node_totals(ctx.fs_root, ctx.now_ms)
        return [
            family(
                f"{PREFIX}_node_cpu_seconds_total",
                MetricKind.COUNTER,
                "Cumulative busy CPU time of the node in seconds",
                [({}, totals.cpu_seconds)],
            ),
            family(
                f"{PREFIX}_node_memory_bytes",
                MetricKind.GAUGE,
                "Memory in use on the node in bytes",
                [({}, totals.memory_bytes)],
            ),
        ]


class RaplCollector(Collector):
    name = "rapl"

    def collect(self, ctx: ScrapeContext) -> list[MetricFamily]:
        counters = read_energy_counters(ctx.fs_root, ctx.now_ms)

        def labels(c):
            return {"domain": c.domain.value, "socket": str(c.socket_index)}

        return [
            family(
                f"{PREFIX}_rapl_energy_microjoules_total",
                MetricKind.COUNTER,
                "RAPL energy counter in microjoules; wraps at the max range",
                [(labels(c), c.energy_microjoules) for c in counters.items],
            ),
            family(
                f"{PREFIX}_rapl_max_energy_range_microjoules",
                MetricKind.GAUGE,
                "Value at which the RAPL energy counter wraps",
                [(labels(c), c.max_range_microjoules) for c in counters.items],
            ),
            family(
                f"{PREFIX}_rapl_available",
                MetricKind.GAUGE,
                "Whether a powercap RAPL tree exists on the node",
                [({}, 1.0 if counters.available else 0.0)],
            ),
        ]


class IPMICollector(Collector):
    name = "ipmi"

    def __init__(self, reader: IPMIReader, source_factory: Callable[[Path], PowerReadingSource]):
        self.reader = reader
        self.source_factory = source_factory

    def collect(self, ctx: ScrapeContext) -> list[MetricFamily]:
        reading = self.reader.read(self.source_factory(ctx.fs_root))
        samples = [] if reading is None else [({"source": reading.source}, reading.watts)]
        return [
            family(
                f"{PREFIX}_node_power_watts",
                MetricKind.GAUGE,
                "Whole-node power reported by IPMI-DCMI in watts",
                samples,
            ),
            family(
                f"{PREFIX}_ipmi_available",
                MetricKind.GAUGE,
                "Whether the last IPMI-DCMI reading succeeded",
                [({}, 0.0 if reading is None else 1.0)],
            ),
        ]


class GpuMapCollector(Collector):
    name = "gpumap"

    def __init__(self, map_path: Path, power_path: Path):
        self.map_path = map_path
        self.power_path = power_path

    def collect(self, ctx: ScrapeContext) -> list[MetricFamily]:
        mapping = collect_gpu_map(ctx.fs_root / self.map_path).items
        power = read_gpu_power(ctx.fs_root / self.power_path).items
        return [
            family(
                f"{PREFIX}_workload_gpu",
                MetricKind.GAUGE,
                "GPU devices bound to each workload",
                [
                    (
                        {
                            "workload_id": e.workload_id,
                            "gpu_index": str(e.gpu_index),
                            "gpu_uuid": e.gpu_uuid,
                        },
                        1.0,
                    )
                    for e in mapping
                ],
            ),
            family(
                f"{PREFIX}_gpu_power_watts",
                MetricKind.GAUGE,
                "GPU power draw in watts",
                [({"gpu_index": str(p.gpu_index)}, p.watts) for p in power],
            ),
            family(
                f"{PREFIX}_gpu_utilization_ratio",
                MetricKind.GAUGE,
                "GPU utilization between 0 and 1",
                [({"gpu_index": str(p.gpu_index)}, p.utilization) for p in power],
            ),
        ]


class NodeExporter:
    """Runs the enabled collectors and assembles one scrape"""

    def __init__(
        self,
        fs_root: Path,
        collectors: list[Collector],
        clock: Callable[[], float] = time.time,
    ):
        self.fs_root = Path(fs_root)
        self.collectors = collectors
        self.clock = clock

    @classmethod
    def from_config(
        cls, config: ExporterConfig, clock: Callable[[], float] = time.time
    ) -> "NodeExporter":
        toggles = config.collectors
        collectors: list[Collector] = []
        if toggles.cgroup:
            collectors.append(CgroupCollector(config.cgroup_layout))
        if toggles.node:
            collectors.append(NodeCollector())
        if toggles.rapl:
            collectors.append(RaplCollector())
        if toggles.ipmi:
            reader = IPMIReader(config.ipmi.min_interval_seconds, clock)
            if config.ipmi.source == "file":
                factory = lambda root: FilePowerSource(root / config.ipmi.path)  # noqa: E731
            else:
                command_source = CommandPowerSource(
                    config.ipmi.command, config.ipmi.command_timeout_seconds
                )
                factory = lambda root: command_source  # noqa: E731
            collectors.append(IPMICollector(reader, factory))
        if toggles.gpumap:
            collectors.append(GpuMapCollector(config.gpu_map_path, config.gpu_power_path))
        return cls(config.fs_root, collectors, clock)

    @property
    def enabled(self) -> list[str]:
        return [c.name for c in self.collectors]

    def scrape(self, now_ms: Optional[int] = None) -> list[MetricFamily]:
        ctx = ScrapeContext(
            fs_root=self.fs_root,
            now_ms=now_ms if now_ms is not None else int(self.clock() * 1000),
        )
        families: list[MetricFamily] = []
        for collector in self.collectors:
            try:
                families.extend(collector.collect(ctx))
                ok = True
            except Exception as e:
                logger.warning("⚠️ Collector %s failed: %s", collector.name, e)
                ok = False
            families.append(collector.success_family(ok))
        return families
