from dataclasses import dataclass, field
from typing import Generic, TypeVar

from wattline.models.power import RaplDomain

T = TypeVar("T")


@dataclass(frozen=True, slots=True)
class UsageSample:
    """Cumulative CPU time and current memory of one workload cgroup"""

    workload_id: str
    cpu_time_seconds: float
    memory_bytes: float
    timestamp: int


@dataclass(frozen=True, slots=True)
class EnergyCounter:
    domain: RaplDomain
    socket_index: int
    energy_microjoules: float
    max_range_microjoules: float
    timestamp: int

    def __post_init__(self):
        if self.max_range_microjoules <= 0:
            raise ValueError("max_range_microjoules must be positive")
        if not 0 <= self.energy_microjoules <= self.max_range_microjoules:
            raise ValueError(
                f"energy {self.energy_microjoules} outside [0, {self.max_range_microjoules}]"
            )


@dataclass(frozen=True, slots=True)
class NodePowerReading:
    watts: float
    timestamp: int
    source: str = "ipmi_dcmi"


@dataclass(frozen=True, slots=True)
class GpuMapEntry:
    workload_id: str
    gpu_index: int
    gpu_uuid: str


@dataclass(frozen=True, slots=True)
class GpuPowerEntry:
    gpu_index: int
    watts: float
    utilization: float


@dataclass(frozen=True, slots=True)
class NodeTotals:
    cpu_seconds: float
    memory_bytes: float
    timestamp: int


@dataclass(slots=True)
class Collected(Generic[T]):
    """Items read by one collection pass, with the count of entries skipped"""

    items: list[T] = field(default_factory=list)
    skipped: int = 0
    available: bool = True
