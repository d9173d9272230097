"""
Recording-rule generation: the attribution formula for a hardware profile
written as a TSDB expression over the exporter's metric families.
"""

from pathlib import Path
from typing import Mapping, Optional

import yaml
from pydantic import ValidationError

from wattline.core.config import format_validation_error
from wattline.core.exceptions import ConfigError, RuleGenerationError
from wattline.models.power import HardwareProfile

RECORD_NAME = "wattline_unit_power_watts"
DEFAULT_RATE_WINDOW = "2m"

DEFAULT_METRIC_NAMES: dict[str, str] = {
    "node_power": "wattline_node_power_watts",
    "cpu_seconds": "wattline_cpu_seconds_total",
    "memory": "wattline_memory_bytes",
    "node_cpu_seconds": "wattline_node_cpu_seconds_total",
    "node_memory": "wattline_node_memory_bytes",
    "rapl_energy": "wattline_rapl_energy_microjoules_total",
    "gpu_power": "wattline_gpu_power_watts",
}

JOIN = "on (instance) group_left ()"


def _fmt(value: float) -> str:
    return f"{value:g}"


def required_families(profile: HardwareProfile) -> list[str]:
    keys = ["node_power", "cpu_seconds", "memory", "node_cpu_seconds"]
    if profile.has_dram:
        keys += ["node_memory", "rapl_energy"]
    if profile.ipmi_includes_gpu:
        keys.append("gpu_power")
    return keys


def generate_rule_expression(
    profile: HardwareProfile,
    metric_names: Optional[Mapping[str, str]] = None,
    rate_window: str = DEFAULT_RATE_WINDOW,
) -> str:
    names = DEFAULT_METRIC_NAMES if metric_names is None else metric_names
    missing = [key for key in required_families(profile) if key not in names]
    if missing:
        raise RuleGenerationError(
            f"metric name map lacks required families: {', '.join(missing)}"
        )

    ipmi = f'sum by (instance) ({names["node_power"]}{{source="ipmi_dcmi"}})'
    if profile.ipmi_includes_gpu:
        base = f'clamp_min({ipmi} - sum by (instance) ({names["gpu_power"]}), 0)'
    else:
        base = ipmi
    cpu_share = (
        f'(rate({names["cpu_seconds"]}[{rate_window}]) / {JOIN} '
        f'sum by (instance) (rate({names["node_cpu_seconds"]}[{rate_window}])))'
    )
    serviceable = _fmt(profile.serviceable_fraction)

    terms = []
    if profile.has_dram:
        rapl = names["rapl_energy"]
        rapl_cpu = f'sum by (instance) (rate({rapl}{{domain="cpu_package"}}[{rate_window}]))'
        rapl_dram = f'sum by (instance) (rate({rapl}{{domain="dram"}}[{rate_window}]))'
        rapl_sum = f"({rapl_cpu} + {rapl_dram})"
        # an idle or unreadable RAPL pair gives the whole split to the CPU
        cpu_split = f"(({rapl_cpu} / ({rapl_sum} > 0)) or ({rapl_sum} * 0 + 1))"
        dram_split = f"(({rapl_dram} / ({rapl_sum} > 0)) or ({rapl_sum} * 0))"
        mem_share = (
            f'({names["memory"]} / {JOIN} sum by (instance) ({names["node_memory"]}))'
        )
        terms.append(
            f"{serviceable} * {cpu_share} * {JOIN} ({base} * {cpu_split})"
        )
        terms.append(
            f"{serviceable} * {mem_share} * {JOIN} ({base} * {dram_split})"
        )
    else:
        terms.append(f"{serviceable} * {cpu_share} * {JOIN} {base}")
    if profile.network_fraction > 0:
        n_jobs = f'count by (instance) ({names["memory"]})'
        terms.append(
            f'{_fmt(profile.network_fraction)} * ({names["memory"]} * 0 + {JOIN} ({base} / {n_jobs}))'
        )
    return " + ".join(terms)


def generate_rule_file(
    groups: Mapping[str, HardwareProfile],
    metric_names: Optional[Mapping[str, str]] = None,
    rate_window: str = DEFAULT_RATE_WINDOW,
) -> str:
    """Render one rule group per node group in the standard rule-file layout"""
    document = {
        "groups": [
            {
                "name": f"wattline-{name}",
                "rules": [
                    {
                        "record": RECORD_NAME,
                        "expr": generate_rule_expression(profile, metric_names, rate_window),
                        "labels": {"node_group": name},
                    }
                ],
            }
            for name, profile in groups.items()
        ]
    }
    return yaml.safe_dump(document, sort_keys=False, width=10_000)


def load_profile_file(path: Path | str) -> dict[str, HardwareProfile]:
    """
    Read node-group profiles from YAML. Accepts either a single profile
    mapping (group name taken from the file stem) or {groups: {name: profile}}.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read profile file {path}: {e}") from e
    raw = data["groups"] if isinstance(data, dict) and "groups" in data else {path.stem: data}
    try:
        return {name: HardwareProfile.model_validate(body or {}) for name, body in raw.items()}
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None
