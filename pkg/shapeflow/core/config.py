"""Application configuration."""

from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from shapeflow.core.exceptions import ConfigError
from shapeflow.models.schemas import PipelineConfig


class Settings(BaseSettings):
    """Process-level settings."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="SHAPEFLOW_",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Logging
    LOG_FORMAT: str = "console"  # "json" or "console"

    # Execution
    THREADS: int = 1
    OUTPUT_DIR: str = "runs"
    PRESET: str = "desk"

    # Observability
    METRICS_ENABLED: bool = True


settings = Settings()

PRESETS = ("desk", "paper")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_preset_data(preset: str) -> Dict[str, Any]:
    """Read a shipped preset as a plain dictionary."""
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}', expected one of {PRESETS}")
    text = resources.files("shapeflow.presets").joinpath(f"{preset}.yaml").read_text(
        encoding="utf-8"
    )
    return yaml.safe_load(text) or {}


def load_pipeline_config(
    preset: Optional[str] = None,
    config_path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """
    Resolve the pipeline configuration.

    The preset is loaded first and its execution settings are replaced by
    SHAPEFLOW_THREADS and SHAPEFLOW_OUTPUT_DIR. A user YAML file is
    deep-merged over that and explicit overrides (CLI flags) are applied last.

    Raises:
        ConfigError: If a file is missing, unreadable or fails validation
    """
    data = load_preset_data(preset or settings.PRESET)
    data["threads"] = settings.THREADS
    data["output_dir"] = settings.OUTPUT_DIR

    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"Config file {path} must contain a mapping")
        data = _deep_merge(data, user)

    if overrides:
        data = _deep_merge(data, overrides)

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid pipeline configuration: {e}") from e


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON dump of a resolved configuration."""
    payload = config.model_dump_json()
    return hashlib.sha256(payload.encode()).hexdigest()
