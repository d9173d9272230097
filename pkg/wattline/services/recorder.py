"""
In-process stand-in for recording-rule evaluation.

From two consecutive scrapes of an instance it builds the node snapshot
(counter rates over the interval, gauges at the later scrape), runs the
attribution and returns the derived per-workload series.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional

from wattline.core.exceptions import ContractError
from wattline.models.metrics import LabelSet, MetricFamily, Sample
from wattline.models.node import EnergyCounter
from wattline.models.power import (
    HardwareProfile,
    NodeSnapshot,
    RaplDomain,
    WorkloadShare,
)
from wattline.services.attribution import attribute_node
from wattline.services.collectors import counter_delta

logger = logging.getLogger(__name__)

UNIT_POWER = "wattline_unit_power_watts"
UNATTRIBUTED = "wattline_node_unattributed_watts"
UNIT_GPU_POWER = "wattline_unit_gpu_power_watts"
UNIT_GPU_UTIL = "wattline_unit_gpu_utilization_ratio"


@dataclass
class ScrapeView:
    """The values of one scrape that attribution needs"""

    timestamp: int
    cpu_seconds: dict[str, float] = field(default_factory=dict)
    memory_bytes: dict[str, float] = field(default_factory=dict)
    node_cpu_seconds: Optional[float] = None
    node_memory_bytes: Optional[float] = None
    rapl: dict[tuple[RaplDomain, int], EnergyCounter] = field(default_factory=dict)
    ipmi_watts: Optional[float] = None
    gpu_map: dict[str, list[int]] = field(default_factory=dict)
    gpu_watts: dict[int, float] = field(default_factory=dict)
    gpu_utilization: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_families(cls, families: list[MetricFamily], timestamp: int) -> "ScrapeView":
        view = cls(timestamp)
        max_ranges: dict[tuple[str, str], float] = {}
        energies: dict[tuple[str, str], float] = {}
        for fam in families:
            for s in fam.samples:
                labels = s.labels
                match fam.name:
                    case "wattline_cpu_seconds_total":
                        view.cpu_seconds[labels.get("workload_id")] = s.value
                    case "wattline_memory_bytes":
                        view.memory_bytes[labels.get("workload_id")] = s.value
                    case "wattline_node_cpu_seconds_total":
                        view.node_cpu_seconds = s.value
                    case "wattline_node_memory_bytes":
                        view.node_memory_bytes = s.value
                    case "wattline_node_power_watts":
                        view.ipmi_watts = (view.ipmi_watts or 0.0) + s.value
                    case "wattline_rapl_energy_microjoules_total":
                        energies[(labels.get("domain"), labels.get("socket"))] = s.value
                    case "wattline_rapl_max_energy_range_microjoules":
                        max_ranges[(labels.get("domain"), labels.get("socket"))] = s.value
                    case "wattline_workload_gpu":
                        view.gpu_map.setdefault(labels.get("workload_id"), []).append(
                            int(labels.get("gpu_index"))
                        )
                    case "wattline_gpu_power_watts":
                        view.gpu_watts[int(labels.get("gpu_index"))] = s.value
                    case "wattline_gpu_utilization_ratio":
                        view.gpu_utilization[int(labels.get("gpu_index"))] = s.value
        for key, energy in energies.items():
            if key not in max_ranges:
                continue
            domain, socket = RaplDomain(key[0]), int(key[1])
            view.rapl[(domain, socket)] = EnergyCounter(
                domain, socket, energy, max_ranges[key], timestamp
            )
        return view


def _rapl_watts(prev: ScrapeView, curr: ScrapeView, dt: float) -> dict[RaplDomain, float]:
    watts: dict[RaplDomain, float] = defaultdict(float)
    for key, counter in curr.rapl.items():
        previous = prev.rapl.get(key)
        if previous is not None:
            watts[key[0]] += counter_delta(previous, counter) / 1e6 / dt
    return dict(watts)


def build_snapshot(prev: ScrapeView, curr: ScrapeView, profile: HardwareProfile) -> NodeSnapshot:
    """Workloads present in both scrapes take part; new ones start next interval"""
    dt = (curr.timestamp - prev.timestamp) / 1000
    if dt <= 0:
        raise ContractError("scrapes are not in time order")
    if curr.ipmi_watts is None:
        raise ContractError("no IPMI reading in the current scrape")
    if curr.node_cpu_seconds is None or prev.node_cpu_seconds is None:
        raise ContractError("node CPU totals missing")

    shares = []
    for workload_id, cpu in sorted(curr.cpu_seconds.items()):
        if workload_id not in prev.cpu_seconds:
            continue
        shares.append(
            WorkloadShare(
                workload_id,
                max(cpu - prev.cpu_seconds[workload_id], 0.0) / dt,
                curr.memory_bytes.get(workload_id, 0.0),
            )
        )
    node_cpu_rate = max(curr.node_cpu_seconds - prev.node_cpu_seconds, 0.0) / dt
    node_memory = curr.node_memory_bytes or 0.0
    # counters are read at slightly different moments; never let shares exceed the node
    node_cpu_rate = max(node_cpu_rate, sum(s.cpu_time_rate for s in shares))
    node_memory = max(node_memory, sum(s.memory_bytes for s in shares))

    rapl = _rapl_watts(prev, curr, dt)
    if profile.has_cpu and RaplDomain.CPU_PACKAGE not in rapl:
        raise ContractError("profile expects a cpu_package RAPL domain the node does not expose")
    if profile.has_dram and RaplDomain.DRAM not in rapl:
        raise ContractError("profile expects a dram RAPL domain the node does not expose")

    return NodeSnapshot(
        timestamp=curr.timestamp,
        p_ipmi_watts=curr.ipmi_watts,
        node_cpu_time_rate=node_cpu_rate,
        node_memory_bytes=node_memory,
        p_rapl_cpu_watts=rapl[RaplDomain.CPU_PACKAGE] if profile.has_cpu else None,
        p_rapl_dram_watts=rapl[RaplDomain.DRAM] if profile.has_dram else None,
        p_gpu_watts=sum(curr.gpu_watts.values()),
        workloads=tuple(shares),
    )


class PowerRecorder:
    """Keeps the previous scrape of each instance and derives power series"""

    def __init__(
        self,
        profiles: Mapping[str, HardwareProfile],
        node_groups: Mapping[str, str] | None = None,
        default_group: Optional[str] = None,
    ):
        if not profiles:
            raise ContractError("at least one hardware profile is required")
        self.profiles = dict(profiles)
        self.node_groups = dict(node_groups or {})
        self.default_group = default_group or next(iter(self.profiles))
        self.skipped = 0
        self._previous: dict[str, ScrapeView] = {}

    def profile_for(self, instance: str) -> HardwareProfile:
        return self.profiles[self.node_groups.get(instance, self.default_group)]

    def record(self, instance: str, families: list[MetricFamily], timestamp: int) -> list[Sample]:
        curr = ScrapeView.from_families(families, timestamp)
        prev = self._previous.get(instance)
        self._previous[instance] = curr
        if prev is None:
            return []
        try:
            snapshot = build_snapshot(prev, curr, self.profile_for(instance))
            attribution = attribute_node(snapshot, self.profile_for(instance))
        except ContractError as e:
            self.skipped += 1
            logger.warning("⚠️ No attribution for %s at %d: %s", instance, timestamp, e)
            return []

        samples = [
            Sample(
                UNIT_POWER,
                LabelSet.of(workload_id=p.workload_id, instance=instance),
                p.watts,
                timestamp,
            )
            for p in attribution.workloads
        ]
        samples.append(
            Sample(UNATTRIBUTED, LabelSet.of(instance=instance), attribution.unattributed_watts, timestamp)
        )
        for share in snapshot.workloads:
            gpus = curr.gpu_map.get(share.workload_id)
            if not gpus:
                continue
            labels = LabelSet.of(workload_id=share.workload_id, instance=instance)
            samples.append(
                Sample(UNIT_GPU_POWER, labels, sum(curr.gpu_watts.get(g, 0.0) for g in gpus), timestamp)
            )
            utilization = [curr.gpu_utilization[g] for g in gpus if g in curr.gpu_utilization]
            if utilization:
                samples.append(
                    Sample(UNIT_GPU_UTIL, labels, sum(utilization) / len(utilization), timestamp)
                )
        return samples

    def forget(self, instance: str) -> None:
        self._previous.pop(instance, None)
