"""
Node power attribution and power-to-energy integration.

Node power is split among the workloads running on the node: the
serviceable share goes to CPU and DRAM (proportional to the RAPL split),
each part is shared by CPU time and memory, and the network fraction is
shared equally.
"""

import math

import numpy as np

from wattline.core.exceptions import ContractError
from wattline.models.metrics import TimeSeries
from wattline.models.power import (
    Attribution,
    AttributedPower,
    HardwareProfile,
    NodeSnapshot,
)

JOULES_PER_KWH = 3.6e6
SHARE_TOLERANCE = 1e-6


def _require_non_negative(name: str, value: float) -> None:
    if math.isnan(value) or value < 0:
        raise ContractError(f"{name} must be a non-negative number, got {value}")


def _validate(snapshot: NodeSnapshot, profile: HardwareProfile) -> None:
    for name in ("p_ipmi_watts", "node_cpu_time_rate", "node_memory_bytes", "p_gpu_watts"):
        _require_non_negative(name, getattr(snapshot, name))
    for name, present, value in (
        ("cpu_package", profile.has_cpu, snapshot.p_rapl_cpu_watts),
        ("dram", profile.has_dram, snapshot.p_rapl_dram_watts),
    ):
        if present != (value is not None):
            raise ContractError(
                f"profile and snapshot disagree on RAPL domain {name}"
            )
        if value is not None:
            _require_non_negative(f"p_rapl_{name}_watts", value)

    cpu_sum = 0.0
    mem_sum = 0.0
    for w in snapshot.workloads:
        _require_non_negative(f"cpu_time_rate of {w.workload_id}", w.cpu_time_rate)
        _require_non_negative(f"memory_bytes of {w.workload_id}", w.memory_bytes)
        cpu_sum += w.cpu_time_rate
        mem_sum += w.memory_bytes
    if cpu_sum > snapshot.node_cpu_time_rate * (1 + SHARE_TOLERANCE) and snapshot.node_cpu_time_rate > 0:
        raise ContractError("workload CPU time exceeds node CPU time")
    if mem_sum > snapshot.node_memory_bytes * (1 + SHARE_TOLERANCE) and snapshot.node_memory_bytes > 0:
        raise ContractError("workload memory exceeds node memory")


def base_power(snapshot: NodeSnapshot, profile: HardwareProfile) -> float:
    """IPMI power net of GPU draw when the BMC reading includes GPUs"""
    watts = snapshot.p_ipmi_watts
    if profile.ipmi_includes_gpu:
        watts -= snapshot.p_gpu_watts
    return max(watts, 0.0)


def attribute_node(snapshot: NodeSnapshot, profile: HardwareProfile) -> Attribution:
    """Split one node snapshot among its workloads and report the residual"""
    _validate(snapshot, profile)
    p_base = base_power(snapshot, profile)
    n_jobs = snapshot.n_jobs
    if n_jobs == 0:
        return Attribution(snapshot.timestamp, (), p_base)

    p_serviceable = profile.serviceable_fraction * p_base
    rapl_cpu = snapshot.p_rapl_cpu_watts or 0.0
    rapl_dram = snapshot.p_rapl_dram_watts or 0.0
    rapl_total = rapl_cpu + rapl_dram
    if profile.has_dram and rapl_total > 0:
        cpu_split = rapl_cpu / rapl_total
        dram_split = rapl_dram / rapl_total
    else:
        # no DRAM domain, or RAPL reports nothing: split by CPU time only
        cpu_split, dram_split = 1.0, 0.0

    t_node = snapshot.node_cpu_time_rate
    m_node = snapshot.node_memory_bytes
    network_each = profile.network_fraction * p_base / n_jobs

    result = []
    for w in snapshot.workloads:
        cpu_watts = p_serviceable * cpu_split * (w.cpu_time_rate / t_node) if t_node > 0 else 0.0
        dram_watts = p_serviceable * dram_split * (w.memory_bytes / m_node) if m_node > 0 else 0.0
        result.append(
            AttributedPower(
                workload_id=w.workload_id,
                watts=cpu_watts + dram_watts + network_each,
                cpu_watts=cpu_watts,
                dram_watts=dram_watts,
                network_watts=network_each,
            )
        )
    attributed = math.fsum(p.watts for p in result)
    return Attribution(snapshot.timestamp, tuple(result), max(p_base - attributed, 0.0))


def attribute_power(snapshot: NodeSnapshot, profile: HardwareProfile) -> list[AttributedPower]:
    return list(attribute_node(snapshot, profile).workloads)


def _checked_arrays(series: TimeSeries) -> tuple[np.ndarray, np.ndarray]:
    seconds = np.asarray(series.timestamps, dtype=float) / 1000.0
    watts = np.asarray(series.values, dtype=float)
    if np.isnan(watts).any() or (watts < 0).any():
        raise ContractError("power series contains negative or NaN values")
    return seconds, watts


def integrate_energy(series: TimeSeries) -> tuple[float, float]:
    """Trapezoidal energy of a watts series; returns (joules, kWh)"""
    if len(series) < 2:
        return 0.0, 0.0
    seconds, watts = _checked_arrays(series)
    joules = float(np.trapezoid(watts, seconds))
    return joules, joules / JOULES_PER_KWH


def interval_energy(series: TimeSeries) -> list[tuple[int, float]]:
    """Joules of each inter-sample interval, keyed by the interval start (ms)"""
    if len(series) < 2:
        return []
    seconds, watts = _checked_arrays(series)
    joules = np.diff(seconds) * (watts[1:] + watts[:-1]) / 2.0
    return list(zip(series.timestamps[:-1], joules.tolist()))
