import time

import httpx

from wattline.core.config import (
    BasicAuthConfig,
    CollectorToggles,
    ExporterConfig,
    IPMIConfig,
    SharedConfig,
    StackConfig,
)
from wattline.core.security import hash_password
from wattline.main import create_exporter_app
from wattline.services.exporter import NodeExporter
from wattline.services.exposition import parse_exposition, render_exposition


def _config(root, **toggles) -> ExporterConfig:
    return ExporterConfig(
        fs_root=root,
        collectors=CollectorToggles(**toggles),
        ipmi=IPMIConfig(source="file", min_interval_seconds=0),
    )


def _by_name(families):
    return {f.name: f for f in families}


def test_scrape_reports_every_collector(node_root, clock):
    root = node_root(
        jobs={"7": (3_000_000, 4096)},
        rapl={"0": 10, "0:0": 20},
        gpu_map="7 0 GPU-x\n",
        gpu_power="0 120.0 0.5\n",
    )
    exporter = NodeExporter.from_config(_config(root, gpumap=True), clock)
    families = _by_name(exporter.scrape())
    for name in ("cgroup", "node", "rapl", "ipmi", "gpumap"):
        assert families[f"wattline_{name}_collector_success"].samples[0].value == 1.0
    assert families["wattline_cpu_seconds_total"].samples[0].value == 3.0
    assert families["wattline_node_power_watts"].samples[0].labels.get("source") == "ipmi_dcmi"
    assert families["wattline_workload_gpu"].samples[0].labels.get("gpu_uuid") == "GPU-x"
    assert families["wattline_rapl_available"].samples[0].value == 1.0


def test_failing_collector_does_not_abort_scrape(node_root, clock):
    root = node_root(jobs={"7": (1, 4096)})
    (root / "proc/stat").unlink()
    exporter = NodeExporter.from_config(_config(root), clock)
    families = _by_name(exporter.scrape())
    assert families["wattline_node_collector_success"].samples[0].value == 0.0
    assert families["wattline_cgroup_collector_success"].samples[0].value == 1.0
    assert "wattline_node_cpu_seconds_total" not in families
    assert families["wattline_rapl_available"].samples[0].value == 0.0


def test_disabled_collectors_are_not_run(node_root, clock):
    exporter = NodeExporter.from_config(_config(node_root(), ipmi=False, rapl=False), clock)
    assert exporter.enabled == ["cgroup", "node"]


async def test_metrics_endpoint_serves_exposition(node_root, clock):
    root = node_root(jobs={"1": (1_000_000, 8192), "2": (2_000_000, 4096)}, rapl={"0": 1, "0:0": 2})
    (root / "proc/meminfo").unlink()
    app = create_exporter_app(StackConfig(exporter=_config(root)), clock=clock)
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://node") as client:
        response = await client.get("/metrics")
        health = await client.get("/health")
    assert response.status_code == 200
    assert response.headers["content-type"].startswith("text/plain; version=0.0.4")
    families = _by_name(parse_exposition(response.text))
    assert families["wattline_node_collector_success"].samples[0].value == 0.0
    assert len(families["wattline_memory_bytes"].samples) == 2
    assert render_exposition(parse_exposition(response.text)) == response.text
    assert health.text == "ok"


async def test_metrics_endpoint_requires_basic_auth(node_root, clock):
    shared = SharedConfig(basic_auth=BasicAuthConfig(username="prom", password_hash=hash_password("s3cret")))
    config = StackConfig(shared=shared, exporter=_config(node_root()))
    app = create_exporter_app(config, clock=clock)
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://node") as client:
        anonymous = await client.get("/metrics")
        wrong = await client.get("/metrics", auth=("prom", "nope"))
        ok = await client.get("/metrics", auth=("prom", "s3cret"))
        again = await client.get("/metrics", auth=("prom", "s3cret"))
    assert anonymous.status_code == 401
    assert anonymous.content == b""
    assert anonymous.headers["www-authenticate"] == "Basic"
    assert wrong.status_code == 401
    assert ok.status_code == 200 and again.status_code == 200


def test_five_hundred_workloads(node_root, clock):
    jobs = {str(100_000 + i): (i * 1000, 4096 * (i + 1)) for i in range(500)}
    exporter = NodeExporter.from_config(_config(node_root(jobs=jobs), ipmi=False), clock)
    families = _by_name(exporter.scrape())
    ids = {s.labels.get("workload_id") for s in families["wattline_cpu_seconds_total"].samples}
    assert ids == set(jobs)
    started = time.perf_counter()
    text = render_exposition(families.values())
    assert time.perf_counter() - started < 0.05
    assert text.count("wattline_memory_bytes{") == 500

