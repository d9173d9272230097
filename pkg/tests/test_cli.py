import socket

import pytest
import yaml

from wattline.core.security import verify_password
from wattline.main import build_parser, main
from wattline.sim import cli as sim_cli


@pytest.fixture
def busy_port():
    holder = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    holder.bind(("127.0.0.1", 0))
    holder.listen()
    yield holder.getsockname()[1]
    holder.close()


def _stack(tmp_path, text: str):
    path = tmp_path / "stack.yaml"
    path.write_text(text)
    return path


def test_hash_password(capsys):
    assert main(["hash-password", "--password", "s3cret"]) == 0
    encoded = capsys.readouterr().out.strip()
    assert verify_password("s3cret", encoded)


def test_rules_command(tmp_path, capsys):
    profile = tmp_path / "gpu.yaml"
    profile.write_text("ipmi_includes_gpu: true\n")
    assert main(["rules", "--profile", str(profile), "--rate-window", "5m"]) == 0
    document = yaml.safe_load(capsys.readouterr().out)
    rule = document["groups"][0]["rules"][0]
    assert document["groups"][0]["name"] == "wattline-gpu"
    assert "[5m]" in rule["expr"]

    profile.write_text("network_fraction: 2\n")
    assert main(["rules", "--profile", str(profile)]) == 1


def test_missing_config_file(tmp_path, capsys):
    assert main(["exporter", "--config", str(tmp_path / "absent.yaml")]) == 1
    assert "Configuration error" in capsys.readouterr().err


def test_missing_section(tmp_path, capsys):
    config = _stack(tmp_path, "exporter:\n  fs_root: /\n")
    assert main(["registry", "--config", str(config)]) == 1
    assert "registry" in capsys.readouterr().err


def test_invalid_flag_override(tmp_path):
    config = _stack(tmp_path, "exporter:\n  fs_root: /\n")
    assert main(["exporter", "--config", str(config), "--web.listen-address", "nowhere"]) == 1


def test_busy_port_is_a_runtime_failure(tmp_path, busy_port):
    config = _stack(tmp_path, f"exporter:\n  fs_root: {tmp_path}\n")
    argv = ["exporter", "--config", str(config), "--web.listen-address", f"127.0.0.1:{busy_port}"]
    assert main(argv) == 2


def test_exporter_flags_parse():
    args = build_parser().parse_args(
        ["exporter", "--config", "s.yaml", "--no-collector.ipmi", "--collector.gpumap", "--path.fs-root", "/x"]
    )
    assert (args.collector_ipmi, args.collector_gpumap, args.collector_rapl) == (False, True, None)
    assert str(args.fs_root) == "/x"


SPEC_YAML = """
node_count: 2
job_rate_per_day: 96
duration_s: 3600
mean_job_duration_s: 600
short_job_fraction: 0.25
seed: 3
"""


def test_sim_generate(tmp_path):
    spec = tmp_path / "cluster.yaml"
    spec.write_text(SPEC_YAML)
    out = tmp_path / "out"
    assert sim_cli.main(["generate", "--spec", str(spec), "--out", str(out), "--materialize", "none"]) == 0
    assert (out / "manifest.jsonl").is_file()
    assert len((out / "accounting.txt").read_text().splitlines()) == 1 + 4
    assert not (out / "nodes").exists()


@pytest.mark.parametrize("content", ["node_count: 0\njob_rate_per_day: 1\n", "job_rate_per_day: [\n"])
def test_sim_bad_spec(tmp_path, content, capsys):
    spec = tmp_path / "cluster.yaml"
    spec.write_text(content)
    assert sim_cli.main(["generate", "--spec", str(spec), "--out", str(tmp_path / "out")]) == 1
    assert "Configuration error" in capsys.readouterr().err
