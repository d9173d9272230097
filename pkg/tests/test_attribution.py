import math

import numpy as np
import pytest

from wattline.core.exceptions import ContractError
from wattline.models.metrics import LabelSet, TimeSeries
from wattline.models.power import HardwareProfile, NodeSnapshot, WorkloadShare
from wattline.services.attribution import (
    attribute_node,
    attribute_power,
    integrate_energy,
    interval_energy,
)

GIB = 1 << 30
CPU_DRAM = HardwareProfile()
CPU_ONLY = HardwareProfile(rapl_domains={"cpu_package"})
GPU_IPMI = HardwareProfile(ipmi_includes_gpu=True)


def _snapshot(workloads, ipmi=500.0, t_node=4.0, m_node=4 * GIB, cpu=200.0, dram=50.0, gpu=0.0):
    return NodeSnapshot(
        timestamp=0,
        p_ipmi_watts=ipmi,
        node_cpu_time_rate=t_node,
        node_memory_bytes=m_node,
        p_rapl_cpu_watts=cpu,
        p_rapl_dram_watts=dram,
        p_gpu_watts=gpu,
        workloads=tuple(WorkloadShare(*w) for w in workloads),
    )


def test_point_check():
    # half the CPU time, a quarter of the memory, two jobs:
    # 0.9*500*0.8*0.5 + 0.9*500*0.2*0.25 + 0.1*500/2
    snapshot = _snapshot([("a", 2.0, 1 * GIB), ("b", 2.0, 3 * GIB)])
    watts = {p.workload_id: p for p in attribute_power(snapshot, CPU_DRAM)}
    assert watts["a"].watts == pytest.approx(227.5, rel=1e-9)
    assert watts["a"].cpu_watts == pytest.approx(180.0, rel=1e-9)
    assert watts["a"].dram_watts == pytest.approx(22.5, rel=1e-9)
    assert watts["a"].network_watts == pytest.approx(25.0, rel=1e-9)
    assert watts["b"].watts == pytest.approx(180.0 + 67.5 + 25.0, rel=1e-9)


def test_no_workloads_leaves_everything_unattributed():
    result = attribute_node(_snapshot([]), CPU_DRAM)
    assert result.workloads == ()
    assert result.unattributed_watts == 500.0


def test_cpu_only_profile_splits_by_cpu_time():
    snapshot = _snapshot([("a", 1.0, GIB), ("b", 3.0, GIB)], dram=None)
    watts = {p.workload_id: p.watts for p in attribute_power(snapshot, CPU_ONLY)}
    assert watts["a"] == pytest.approx(0.9 * 500 * 0.25 + 25.0)
    assert watts["b"] == pytest.approx(0.9 * 500 * 0.75 + 25.0)


def test_gpu_power_is_removed_from_ipmi_when_included():
    snapshot = _snapshot([("a", 4.0, 4 * GIB)], ipmi=800.0, gpu=300.0)
    result = attribute_node(snapshot, GPU_IPMI)
    assert result.workloads[0].watts == pytest.approx(500.0)
    assert result.unattributed_watts == pytest.approx(0.0, abs=1e-9)


def test_zero_rapl_falls_back_to_cpu_split():
    snapshot = _snapshot([("a", 1.0, GIB), ("b", 1.0, 3 * GIB)], cpu=0.0, dram=0.0)
    watts = {p.workload_id: p for p in attribute_power(snapshot, CPU_DRAM)}
    assert watts["a"].dram_watts == 0.0
    assert watts["a"].cpu_watts == pytest.approx(0.9 * 500 * 0.25)


@pytest.mark.parametrize(
    "snapshot, profile",
    [
        (_snapshot([("a", 5.0, GIB)]), CPU_DRAM),
        (_snapshot([("a", 1.0, 5 * GIB)]), CPU_DRAM),
        (_snapshot([("a", -1.0, GIB)]), CPU_DRAM),
        (_snapshot([("a", 1.0, GIB)], ipmi=math.nan), CPU_DRAM),
        (_snapshot([("a", 1.0, GIB)]), CPU_ONLY),
        (_snapshot([("a", 1.0, GIB)], dram=None), CPU_DRAM),
    ],
)
def test_contract_violations(snapshot, profile):
    with pytest.raises(ContractError):
        attribute_node(snapshot, profile)


def _random_case(rng: np.random.Generator, full: bool):
    n = int(rng.integers(1, 12))
    rates = rng.uniform(0, 4, n)
    memory = rng.uniform(0, 8 * GIB, n)
    t_node = rates.sum() if full else rates.sum() * rng.uniform(1, 3)
    m_node = memory.sum() if full else memory.sum() * rng.uniform(1, 3)
    workloads = [(f"w{i}", float(r), float(m)) for i, (r, m) in enumerate(zip(rates, memory))]
    snapshot = _snapshot(
        workloads,
        ipmi=float(rng.uniform(50, 1500)),
        t_node=float(t_node),
        m_node=float(m_node),
        cpu=float(rng.uniform(0, 400)),
        dram=float(rng.uniform(0, 100)),
    )
    profile = HardwareProfile(network_fraction=float(rng.uniform(0, 0.5)))
    return snapshot, profile


def test_conservation_when_workloads_fill_the_node():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        snapshot, profile = _random_case(rng, full=True)
        result = attribute_node(snapshot, profile)
        total = math.fsum(p.watts for p in result.workloads)
        assert total == pytest.approx(snapshot.p_ipmi_watts, rel=1e-9)
        assert result.unattributed_watts == pytest.approx(0.0, abs=1e-6)


def test_attribution_never_exceeds_node_power():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        snapshot, profile = _random_case(rng, full=False)
        result = attribute_node(snapshot, profile)
        total = math.fsum(p.watts for p in result.workloads)
        assert total <= snapshot.p_ipmi_watts * (1 + 1e-9)
        assert total + result.unattributed_watts == pytest.approx(snapshot.p_ipmi_watts, rel=1e-9)
        assert all(p.watts >= 0 for p in result.workloads)


def test_scale_invariance():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        snapshot, profile = _random_case(rng, full=False)
        k = float(rng.uniform(0.1, 10))
        scaled = NodeSnapshot(
            timestamp=snapshot.timestamp,
            p_ipmi_watts=snapshot.p_ipmi_watts,
            node_cpu_time_rate=snapshot.node_cpu_time_rate * k,
            node_memory_bytes=snapshot.node_memory_bytes * k,
            p_rapl_cpu_watts=snapshot.p_rapl_cpu_watts,
            p_rapl_dram_watts=snapshot.p_rapl_dram_watts,
            workloads=tuple(
                WorkloadShare(w.workload_id, w.cpu_time_rate * k, w.memory_bytes * k)
                for w in snapshot.workloads
            ),
        )
        before = [p.watts for p in attribute_power(snapshot, profile)]
        after = [p.watts for p in attribute_power(scaled, profile)]
        assert after == pytest.approx(before, rel=1e-9)


def test_monotonic_in_cpu_time():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        snapshot, profile = _random_case(rng, full=False)
        first = snapshot.workloads[0]
        slack = snapshot.node_cpu_time_rate - sum(w.cpu_time_rate for w in snapshot.workloads)
        bumped = WorkloadShare(first.workload_id, first.cpu_time_rate + slack * 0.5, first.memory_bytes)
        grown = NodeSnapshot(
            timestamp=snapshot.timestamp,
            p_ipmi_watts=snapshot.p_ipmi_watts,
            node_cpu_time_rate=snapshot.node_cpu_time_rate,
            node_memory_bytes=snapshot.node_memory_bytes,
            p_rapl_cpu_watts=snapshot.p_rapl_cpu_watts,
            p_rapl_dram_watts=snapshot.p_rapl_dram_watts,
            workloads=(bumped, *snapshot.workloads[1:]),
        )
        assert attribute_power(grown, profile)[0].watts >= attribute_power(snapshot, profile)[0].watts


def _constant_series(watts: float, seconds: int, step: int = 15) -> TimeSeries:
    return TimeSeries(LabelSet(), tuple((t * 1000, watts) for t in range(0, seconds + 1, step)))


def test_integrate_constant_power():
    joules, kwh = integrate_energy(_constant_series(216.25, 7200))
    assert joules == pytest.approx(216.25 * 7200)
    assert kwh == pytest.approx(0.4325)


def test_integrate_needs_two_points():
    assert integrate_energy(TimeSeries(LabelSet(), ((0, 100.0),))) == (0.0, 0.0)
    assert interval_energy(TimeSeries(LabelSet())) == []


def test_trapezoid_between_uneven_samples():
    series = TimeSeries(LabelSet(), ((0, 100.0), (10_000, 200.0), (40_000, 200.0)))
    assert integrate_energy(series)[0] == pytest.approx(1500.0 + 6000.0)
    assert interval_energy(series) == [(0, pytest.approx(1500.0)), (10_000, pytest.approx(6000.0))]


def test_negative_power_is_rejected():
    with pytest.raises(ContractError):
        integrate_energy(TimeSeries(LabelSet(), ((0, 1.0), (1000, -1.0))))
