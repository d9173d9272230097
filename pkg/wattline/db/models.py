from sqlalchemy import (
    BigInteger,
    Boolean,
    Column,
    Float,
    ForeignKey,
    Index,
    Integer,
    String,
    Text,
    UniqueConstraint,
)
from sqlalchemy.orm import relationship

from wattline.db.database import Base
from wattline.models.workloads import (
    AggregateMetrics,
    AggregateScope,
    ResourceManager,
    WorkloadUnit,
)


class Unit(Base):
    """Compute unit in the unified schema; rows are never deleted"""
    __tablename__ = "units"
    __table_args__ = (
        UniqueConstraint("cluster_id", "uuid", name="uq_units_cluster_uuid"),
        Index("ix_units_user", "user"),
        Index("ix_units_project", "project"),
    )

    id = Column(Integer, primary_key=True)
    cluster_id = Column(String(255), nullable=False)
    uuid = Column(String(255), nullable=False)
    resource_manager = Column(String(32), nullable=False, default=ResourceManager.SLURM.value)
    user = Column(String(255), nullable=False)
    project = Column(String(255), nullable=False)
    created_at = Column(BigInteger, nullable=False)
    started_at = Column(BigInteger, nullable=False)
    ended_at = Column(BigInteger, nullable=True)
    alloc_cpus = Column(Integer, nullable=False, default=0)
    alloc_memory_bytes = Column(BigInteger, nullable=False, default=0)
    gpu_indices = Column(String(255), nullable=False, default="")
    purged = Column(Boolean, nullable=False, default=False)

    # Relationships
    aggregate = relationship(
        "UnitAggregate", back_populates="unit", uselist=False, cascade="all, delete-orphan"
    )
    pending_deletions = relationship(
        "PendingDeletion", back_populates="unit", cascade="all, delete-orphan"
    )

    def to_model(self) -> WorkloadUnit:
        return WorkloadUnit(
            uuid=self.uuid,
            cluster_id=self.cluster_id,
            resource_manager=ResourceManager(self.resource_manager),
            user=self.user,
            project=self.project,
            created_at=self.created_at,
            started_at=self.started_at,
            ended_at=self.ended_at,
            alloc_cpus=self.alloc_cpus,
            alloc_memory_bytes=self.alloc_memory_bytes,
            gpu_indices=[int(i) for i in self.gpu_indices.split(",") if i],
        )

    def apply(self, unit: WorkloadUnit) -> None:
        """Copy every ingested field from the unified model"""
        self.cluster_id = unit.cluster_id
        self.uuid = unit.uuid
        self.resource_manager = unit.resource_manager.value
        self.user = unit.user
        self.project = unit.project
        self.created_at = unit.created_at
        self.started_at = unit.started_at
        self.ended_at = unit.ended_at
        self.alloc_cpus = unit.alloc_cpus
        self.alloc_memory_bytes = unit.alloc_memory_bytes
        self.gpu_indices = ",".join(str(i) for i in unit.gpu_indices)


class UnitAggregate(Base):
    """Latest aggregate of one unit; final once the unit has ended"""
    __tablename__ = "unit_aggregates"

    unit_id = Column(Integer, ForeignKey("units.id"), primary_key=True)
    window_start = Column(BigInteger, nullable=False)
    window_end = Column(BigInteger, nullable=False)
    total_cpu_time_seconds = Column(Float, nullable=False, default=0.0)
    avg_cpu_usage_fraction = Column(Float, nullable=False, default=0.0)
    avg_memory_usage_fraction = Column(Float, nullable=False, default=0.0)
    total_energy_kwh = Column(Float, nullable=False, default=0.0)
    total_emissions_grams = Column(Float, nullable=False, default=0.0)
    avg_gpu_usage_fraction = Column(Float, nullable=True)
    no_data = Column(Boolean, nullable=False, default=False)
    final = Column(Boolean, nullable=False, default=False)

    # Relationships
    unit = relationship("Unit", back_populates="aggregate")

    def to_model(self) -> AggregateMetrics:
        return AggregateMetrics(
            scope=AggregateScope.UNIT,
            key=self.unit.uuid,
            window_start=self.window_start,
            window_end=self.window_end,
            total_cpu_time_seconds=self.total_cpu_time_seconds,
            avg_cpu_usage_fraction=self.avg_cpu_usage_fraction,
            avg_memory_usage_fraction=self.avg_memory_usage_fraction,
            total_energy_kwh=self.total_energy_kwh,
            total_emissions_grams=self.total_emissions_grams,
            avg_gpu_usage_fraction=self.avg_gpu_usage_fraction,
            no_data=self.no_data,
            provisional=not self.final,
        )

    def apply(self, metrics: AggregateMetrics, final: bool) -> None:
        self.window_start = metrics.window_start
        self.window_end = metrics.window_end
        self.total_cpu_time_seconds = metrics.total_cpu_time_seconds
        self.avg_cpu_usage_fraction = metrics.avg_cpu_usage_fraction
        self.avg_memory_usage_fraction = metrics.avg_memory_usage_fraction
        self.total_energy_kwh = metrics.total_energy_kwh
        self.total_emissions_grams = metrics.total_emissions_grams
        self.avg_gpu_usage_fraction = metrics.avg_gpu_usage_fraction
        self.no_data = metrics.no_data
        self.final = final


class PendingDeletion(Base):
    """Series delete request that failed and waits for retry"""
    __tablename__ = "pending_deletions"

    id = Column(Integer, primary_key=True)
    unit_id = Column(Integer, ForeignKey("units.id"), nullable=False, index=True)
    selector = Column(Text, nullable=False)
    attempts = Column(Integer, nullable=False, default=1)
    last_error = Column(Text, nullable=True)

    # Relationships
    unit = relationship("Unit", back_populates="pending_deletions")


class EmissionFactorRecord(Base):
    """Every factor the registry obtained; the schedule for workload emissions"""
    __tablename__ = "emission_factors"
    __table_args__ = (
        UniqueConstraint("region", "timestamp", "provider", name="uq_factor_region_time"),
    )

    id = Column(Integer, primary_key=True)
    region = Column(String(64), nullable=False, index=True)
    grams_per_kwh = Column(Float, nullable=False)
    timestamp = Column(BigInteger, nullable=False)
    provider = Column(String(16), nullable=False)
