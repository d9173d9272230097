from pathlib import Path
from typing import Annotated, Any, Literal, Optional

import yaml
from pydantic import (
    AfterValidator,
    BaseModel,
    ConfigDict,
    Field,
    HttpUrl,
    TypeAdapter,
    ValidationError,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from wattline.core.exceptions import ConfigError

_URL_ADAPTER = TypeAdapter(HttpUrl)


def _check_url(value: str) -> str:
    _URL_ADAPTER.validate_python(value)
    return value.rstrip("/")


def _check_listen_address(value: str) -> str:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit() or not 0 < int(port) < 65536:
        raise ValueError(f"expected host:port, got {value!r}")
    return value


def _check_password_hash(value: str) -> str:
    parts = value.split("$")
    if len(parts) != 3 or parts[0] != "scrypt":
        raise ValueError("password_hash must look like scrypt$<salt>$<hash>; use `wattline hash-password`")
    return value


Url = Annotated[str, AfterValidator(_check_url)]
ListenAddress = Annotated[str, AfterValidator(_check_listen_address)]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BasicAuthConfig(StrictModel):
    username: str = Field(..., min_length=1)
    password_hash: Annotated[str, AfterValidator(_check_password_hash)]


class SharedConfig(StrictModel):
    log_level: Literal["debug", "info", "warning", "error"] = "info"
    basic_auth: Optional[BasicAuthConfig] = Field(
        default=None, description="Credentials required by every service's HTTP API"
    )


class CollectorToggles(StrictModel):
    cgroup: bool = True
    node: bool = True
    rapl: bool = True
    ipmi: bool = True
    gpumap: bool = False


class IPMIConfig(StrictModel):
    source: Literal["command", "file"] = "command"
    command: list[str] = Field(default_factory=lambda: ["ipmitool", "dcmi", "power", "reading"])
    path: Path = Field(default=Path("ipmi/dcmi.txt"), description="Replay file, relative to fs_root")
    min_interval_seconds: float = Field(default=10.0, ge=0)
    command_timeout_seconds: float = Field(default=5.0, gt=0)


class ExporterConfig(StrictModel):
    listen_address: ListenAddress = "0.0.0.0:9010"
    fs_root: Path = Path("/")
    cgroup_layout: str = "slurm"
    collectors: CollectorToggles = Field(default_factory=CollectorToggles)
    ipmi: IPMIConfig = Field(default_factory=IPMIConfig)
    gpu_map_path: Path = Path("gpu/map")
    gpu_power_path: Path = Path("gpu/power")
    # accepted for deployment parity; termination happens in front of the exporter
    tls_cert_file: Optional[Path] = None
    tls_key_file: Optional[Path] = None


class RegistryConfig(StrictModel):
    listen_address: ListenAddress = "0.0.0.0:9020"
    database_path: Path = Path("wattline.db")
    cluster_id: str = Field(default="default", min_length=1)
    resource_manager: Literal["slurm", "libvirt", "kubelet"] = "slurm"
    accounting_file: Optional[Path] = None
    ingest_interval_seconds: float = Field(default=900.0, gt=0)
    aggregation_interval_seconds: float = Field(default=900.0, gt=0)
    cutoff_seconds: int = Field(default=0, ge=0)
    backup_interval_seconds: Optional[float] = Field(default=None, gt=0)
    backup_dir: Optional[Path] = None
    tsdb_url: Url = "http://localhost:9090"
    tsdb_admin_url: Optional[Url] = None
    tsdb_retries: int = Field(default=3, ge=1)
    tsdb_backoff_seconds: float = Field(default=1.0, ge=0)


class GateConfig(StrictModel):
    listen_address: ListenAddress = "0.0.0.0:9030"
    admin_listen_address: Optional[ListenAddress] = "127.0.0.1:9031"
    backends: list[Url] = Field(..., min_length=1)
    strategy: Literal["round_robin", "least_connection"] = "round_robin"
    id_label: str = "workload_id"
    cluster_id: str = "default"
    registry_url: Optional[Url] = None
    registry_db_path: Optional[Path] = None
    timeout_seconds: float = Field(default=30.0, gt=0)
    health_check_interval_seconds: float = Field(default=15.0, gt=0)
    metric_allowlist: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _needs_registry(self) -> "GateConfig":
        if self.registry_url is None and self.registry_db_path is None:
            raise ValueError("gate needs registry_url or registry_db_path")
        return self


class EmissionsConfig(StrictModel):
    region: str = Field(default="FR", min_length=1)
    static_table: Optional[Path] = None
    realtime_url: Optional[Url] = None
    cache_ttl_seconds: float = Field(default=300.0, ge=0)
    request_timeout_seconds: float = Field(default=10.0, gt=0)


class TSDBConfig(StrictModel):
    listen_address: ListenAddress = "0.0.0.0:9090"
    manifest: Optional[Path] = None


class StackConfig(StrictModel):
    """One YAML file; each service reads its own section"""

    shared: SharedConfig = Field(default_factory=SharedConfig)
    exporter: Optional[ExporterConfig] = None
    registry: Optional[RegistryConfig] = None
    gate: Optional[GateConfig] = None
    emissions: Optional[EmissionsConfig] = None
    tsdb: Optional[TSDBConfig] = None

    def redacted(self) -> dict:
        """Dump safe to log: secrets masked"""
        data = self.model_dump(mode="json", exclude_none=True)
        auth = data.get("shared", {}).get("basic_auth")
        if auth:
            auth["password_hash"] = "***"
        return data

    def with_overrides(self, section: str, **values: Any) -> "StackConfig":
        """Apply CLI flag overrides to one section; flags win over the file"""
        data = self.model_dump()
        merged = data.get(section) or {}
        for key, value in values.items():
            if value is None:
                continue
            target = merged
            *parents, leaf = key.split(".")
            for parent in parents:
                target = target.setdefault(parent, {})
            target[leaf] = value
        data[section] = merged
        return validate_config(data)


class EnvSettings(BaseSettings):
    """Secrets that only come from the environment"""

    emission_token: str = Field(default="", description="Bearer token for the emission factor provider")
    registry_password: str = Field(
        default="", description="Plaintext basic-auth password the gate presents to the registry"
    )

    model_config = SettingsConfigDict(
        env_prefix="WATTLINE_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def validate_config(data: Any) -> StackConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    try:
        return StackConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def load_config(path: Path | str) -> StackConfig:
    """Load and validate the stack configuration; never writes or connects"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return validate_config(data)


def require_section(config: StackConfig, name: str):
    section = getattr(config, name, None)
    if section is None:
        raise ConfigError(f"missing configuration section {name!r}")
    return section
