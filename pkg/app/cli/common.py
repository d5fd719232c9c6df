"""
Helpers shared by the subcommands: path checks and config assembly
"""
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from app.core.config import read_config_file, settings
from app.core.exceptions import UsageError
from app.schemas.config import PipelineConfig, ProviderModeEnum


def existing_dir(value: str, flag: str) -> Path:
    path = Path(value)
    if not path.is_dir():
        raise UsageError(f"{flag}: directory not found: {path}")
    return path


def existing_file(value: str, flag: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def parse_provider(value: str) -> dict:
    """``oracle`` or ``files:DIR``"""
    if value == ProviderModeEnum.ORACLE.value:
        return {"mode": ProviderModeEnum.ORACLE, "directory": None}
    if value.startswith("files:") and len(value) > len("files:"):
        directory = existing_dir(value[len("files:"):], "--provider")
        return {"mode": ProviderModeEnum.FILES, "directory": str(directory)}
    raise UsageError(f"--provider must be 'oracle' or 'files:DIR', got {value!r}")


def build_config(config_path: Optional[str], seed: Optional[int] = None,
                 provider: Optional[str] = None) -> PipelineConfig:
    """Config file (or defaults) with command-line overrides applied"""
    config = read_config_file(existing_file(config_path, "--config")) if config_path else PipelineConfig()
    if seed is None and not config_path:
        seed = settings.default_seed
    overrides = {}
    if seed is not None:
        overrides.update(seed=seed, oracle={"seed": seed})
    if provider is not None:
        overrides["provider"] = parse_provider(provider)
    if not overrides:
        return config
    try:
        return config.with_overrides(**overrides)
    except ValidationError as e:
        raise UsageError(f"Invalid configuration: {e}") from e


def output_dir(value: Optional[str], default_name: str) -> Path:
    """``--out`` when given, else a directory under the configured output root"""
    return Path(value) if value else Path(settings.output_root) / default_name
