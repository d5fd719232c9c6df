"""
Application configuration settings and pipeline config files
"""
from pathlib import Path

from dotenv import dotenv_values
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ArtifactIOError, UsageError
from app.schemas.config import PipelineConfig


class Settings(BaseSettings):
    """Process settings with environment variable support"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="SPLATSLAM_",
        case_sensitive=False,
        extra="ignore",
    )

    # Application settings
    app_name: str = "splatslam"
    app_version: str = "1.0.0"

    # Logging
    log_level: str = "INFO"
    log_format: str = "console"  # console | json

    # Run defaults
    output_root: str = "runs"
    default_seed: int = 0


def read_config_file(path) -> PipelineConfig:
    """Parse a ``key = value`` file with dotted keys into a validated PipelineConfig"""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"Config file not found: {path}")
    values = dotenv_values(path)
    empty = [key for key, value in values.items() if value is None]
    if empty:
        raise UsageError(f"Config keys without a value: {', '.join(empty)}")
    return PipelineConfig.from_flat(values)


def write_config_file(path, config: PipelineConfig) -> None:
    """Echo every resolved config key, one ``key = value`` line each"""
    path = Path(path)
    lines = [f"{key} = {value}" for key, value in config.to_flat().items() if value is not None]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise ArtifactIOError("Cannot write config echo", path) from e


# Global settings instance
settings = Settings()
