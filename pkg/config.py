import hashlib
import json
import math
import os
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from classifiers import ModelConfig
from clustering import ClusteringConfig
from errors import ConfigError
from features import FeatureConfig
from segmentation import SegmenterConfig

# Logging configuration
LOG_LEVEL = os.environ.get('GELID_LOG_LEVEL', 'INFO').upper()
LOG_FORMAT = os.environ.get('GELID_LOG_FORMAT', '%(asctime)s %(levelname)s %(name)s: %(message)s')

# Worker pool configuration
WORKERS = int(os.environ.get('GELID_WORKERS', '1'))

# Run ledger configuration (empty disables it)
LEDGER_URL = os.environ.get('GELID_LEDGER_URL', '')

# Artifact configuration
SCHEMA_VERSION = 1
DEFAULT_CONFIG_NAME = 'gelid.conf'

_FILE_VALUES: ContextVar[Dict[str, Any]] = ContextVar('gelid_config_file', default={})


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(ge=0, lt=2**64)
    fractions: Tuple[float, float] = (0.1, 0.9)
    workers: int = Field(default_factory=lambda: WORKERS, ge=1)
    ledger_url: str = Field(default_factory=lambda: LEDGER_URL)
    report_format: Literal["json", "html"] = "json"
    bins_per_channel: int = Field(16, ge=2, le=64)

    @field_validator("fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value):
        if min(value) < 0 or not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {value}")
        return value


class FlatFileSource(PydanticBaseSettingsSource):
    """Values parsed from the `section.key = value` config file"""

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return _FILE_VALUES.get().get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return dict(_FILE_VALUES.get())


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix='GELID_',
        env_nested_delimiter='__',
        case_sensitive=False,
        extra='forbid',
    )

    segmenter: SegmenterConfig = Field(default_factory=SegmenterConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    context: ClusteringConfig = Field(default_factory=ClusteringConfig)
    issues: ClusteringConfig = Field(default_factory=ClusteringConfig)
    pipeline: PipelineConfig

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        # flags > environment > file > defaults
        return init_settings, env_settings, FlatFileSource(settings_cls)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Nested dict from `a.b.c = value` lines; values are JSON literals or bare strings"""
    nested: Dict[str, Any] = {}
    seen = set()
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        if '=' not in stripped:
            raise ConfigError(f"{source}:{number}: expected 'section.key = value'")
        key, raw = (part.strip() for part in stripped.split('=', 1))
        path = key.split('.')
        if len(path) < 2 or not all(path):
            raise ConfigError(f"{source}:{number}: key {key!r} must look like section.key")
        if key in seen:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        seen.add(key)
        node = nested
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}:{number}: {key!r} conflicts with a scalar key")
        if isinstance(node.get(path[-1]), dict):
            raise ConfigError(f"{source}:{number}: {key!r} conflicts with a section")
        node[path[-1]] = _parse_value(raw)
    return nested


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None,
                seed_required: bool = True) -> RunConfig:
    """Build the run configuration from file, environment and explicit overrides"""
    file_values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding='utf-8')
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        file_values = parse_config_text(text, str(path))
    if not seed_required:
        # lowest precedence; environment and flags still win
        file_values.setdefault("pipeline", {}).setdefault("seed", 0)
    token = _FILE_VALUES.set(file_values)
    try:
        return RunConfig(**(overrides or {}))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    finally:
        _FILE_VALUES.reset(token)


def _flatten(prefix: str, value, out: Dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key, item in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, item, out)
    else:
        out[prefix] = value


def dump_config(cfg: RunConfig) -> str:
    """Canonical file form: sorted keys, JSON-literal values"""
    flat: Dict[str, Any] = {}
    _flatten("", cfg.model_dump(mode='json'), flat)
    return "".join(f"{key} = {json.dumps(flat[key], sort_keys=True)}\n" for key in sorted(flat))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode('utf-8')).hexdigest()
