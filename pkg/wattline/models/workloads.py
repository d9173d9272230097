from wattline._compat import StrEnum
from typing import Optional

from pydantic import BaseModel, Field, model_validator


class ResourceManager(StrEnum):
    SLURM = "slurm"
    LIBVIRT = "libvirt"
    KUBELET = "kubelet"


class AggregateScope(StrEnum):
    UNIT = "unit"
    USER = "user"
    PROJECT = "project"


class WorkloadUnit(BaseModel):
    """One compute unit (job, VM or pod) in the unified schema; times in ms"""

    uuid: str = Field(..., min_length=1)
    cluster_id: str = Field(..., min_length=1)
    resource_manager: ResourceManager = ResourceManager.SLURM
    user: str
    project: str
    created_at: int
    started_at: int
    ended_at: Optional[int] = None
    alloc_cpus: int = Field(default=0, ge=0)
    alloc_memory_bytes: int = Field(default=0, ge=0)
    gpu_indices: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _ordered_lifetime(self) -> "WorkloadUnit":
        if self.started_at < self.created_at:
            raise ValueError("started_at precedes created_at")
        if self.ended_at is not None and self.ended_at < self.started_at:
            raise ValueError("ended_at precedes started_at")
        return self

    @property
    def running(self) -> bool:
        return self.ended_at is None


class AggregateMetrics(BaseModel):
    scope: AggregateScope
    key: str
    window_start: int
    window_end: int
    total_cpu_time_seconds: float = 0.0
    avg_cpu_usage_fraction: float = 0.0
    avg_memory_usage_fraction: float = 0.0
    total_energy_kwh: float = 0.0
    total_emissions_grams: float = 0.0
    avg_gpu_usage_fraction: Optional[float] = None
    no_data: bool = False
    provisional: bool = False

    @classmethod
    def zero(cls, scope: AggregateScope, key: str, start: int, end: int, no_data: bool = False):
        return cls(scope=scope, key=key, window_start=start, window_end=end, no_data=no_data)


class IngestReport(BaseModel):
    upserted: int = 0
    errors: int = 0


class DeletionRequest(BaseModel):
    uuid: str
    selector: str
    ok: bool
    error: Optional[str] = None
