from dataclasses import dataclass, field
from wattline._compat import StrEnum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class RaplDomain(StrEnum):
    CPU_PACKAGE = "cpu_package"
    DRAM = "dram"


class HardwareProfile(BaseModel):
    """Which power sources a node group has and how attribution is specialized for it"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    rapl_domains: frozenset[RaplDomain] = Field(
        default=frozenset({RaplDomain.CPU_PACKAGE, RaplDomain.DRAM})
    )
    ipmi_includes_gpu: bool = False
    network_fraction: float = Field(default=0.10, ge=0, lt=1)
    storage_fraction: float = Field(default=0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _fractions_leave_room(self) -> "HardwareProfile":
        if self.network_fraction + self.storage_fraction >= 1:
            raise ValueError("network_fraction + storage_fraction must be < 1")
        return self

    @property
    def serviceable_fraction(self) -> float:
        return 1.0 - self.network_fraction - self.storage_fraction

    @property
    def has_cpu(self) -> bool:
        return RaplDomain.CPU_PACKAGE in self.rapl_domains

    @property
    def has_dram(self) -> bool:
        return RaplDomain.DRAM in self.rapl_domains


@dataclass(frozen=True, slots=True)
class WorkloadShare:
    workload_id: str
    cpu_time_rate: float
    memory_bytes: float


@dataclass(frozen=True, slots=True)
class NodeSnapshot:
    """Every per-node quantity of the attribution formula at one instant"""

    timestamp: int
    p_ipmi_watts: float
    node_cpu_time_rate: float
    node_memory_bytes: float
    p_rapl_cpu_watts: Optional[float] = None
    p_rapl_dram_watts: Optional[float] = None
    p_gpu_watts: float = 0.0
    workloads: tuple[WorkloadShare, ...] = field(default_factory=tuple)

    @property
    def n_jobs(self) -> int:
        return len(self.workloads)


@dataclass(frozen=True, slots=True)
class AttributedPower:
    workload_id: str
    watts: float
    cpu_watts: float
    dram_watts: float
    network_watts: float


@dataclass(frozen=True, slots=True)
class Attribution:
    """Result of splitting one snapshot: per-workload power plus the residual"""

    timestamp: int
    workloads: tuple[AttributedPower, ...]
    unattributed_watts: float
