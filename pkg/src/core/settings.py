"""Run configuration with environment, .env and TOML file support.

Precedence, highest first: command-line flags, run configuration file,
``FLOWFOREST_*`` environment variables, defaults.
"""

from __future__ import annotations

import logging
import tomllib
from pathlib import Path
from typing import Any

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.core.exceptions import MalformedConfigError

logger = logging.getLogger(__name__)

# Load environment variables from .env file if it exists
try:
    from dotenv import load_dotenv

    env_file = Path(__file__).parent.parent.parent / ".env"
    if env_file.exists():
        load_dotenv(env_file)
    else:
        load_dotenv(".env", verbose=False)
except ImportError:
    pass

# Stored timestamps are 17 bits wide in units of 2**7 microseconds.
TIMESTAMP_BITS = 17
TIMESTAMP_UNIT_SHIFT = 7
MAX_PACKET_COUNT = 127


class RunConfig(BaseSettings):
    """Every knob of a pipeline run, validated before any stage starts."""

    # Paths
    capture: str | None = Field(default=None, description="Capture (pcap or packet CSV)")
    labels: str | None = Field(default=None, description="Label CSV keyed by 5-tuple")
    output_dir: str = Field(default="out", description="Artifact directory")

    # Training
    thr_s: float = Field(default=0.9, ge=0.0, description="Minimum F1-macro per model")
    thr_c: float = Field(default=0.0, ge=0.0, description="Minimum certainty to classify")
    packet_counts: list[int] = Field(default_factory=lambda: list(range(1, 21)))
    max_models: int = Field(default=10, ge=1, description="Weight decay horizon")
    cv_folds: int = Field(default=6, ge=2)
    dbscan_eps: float = Field(default=0.3, gt=0.0, lt=1.0)
    dbscan_min_pts: int = Field(default=1, ge=1)
    mi_bins: int = Field(default=64, ge=2)
    grid_n_trees: list[int] = Field(default_factory=lambda: [10])
    grid_max_depth: list[int] = Field(default_factory=lambda: [5, 10])
    grid_class_weights: list[str] = Field(
        default_factory=lambda: ["uniform", "balanced"]
    )
    classify_short_flows: bool = False

    # Compilation
    accuracy: float = Field(default=0.01, gt=0.0, description="Comparison accuracy a")
    max_trees: int = Field(default=32, ge=1)
    max_depth: int = Field(default=20, ge=1)
    stages: int = Field(default=24, ge=1)

    # Simulation
    rows: int = Field(default=65536, ge=1)
    hash_probes: int = Field(default=3, ge=1)
    timeout_us: int = Field(default=10_000_000, ge=0)

    seed: int = Field(default=0, ge=0)
    log_level: str = Field(default="INFO")

    model_config = SettingsConfigDict(
        env_prefix="FLOWFOREST_",
        case_sensitive=False,
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator("packet_counts")
    @classmethod
    def _check_packet_counts(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("packet_counts must not be empty")
        if any(p < 1 or p > MAX_PACKET_COUNT for p in value):
            raise ValueError(f"packet_counts must lie in [1, {MAX_PACKET_COUNT}]")
        if sorted(set(value)) != value:
            raise ValueError("packet_counts must be strictly increasing")
        return value

    @field_validator("grid_class_weights")
    @classmethod
    def _check_class_weights(cls, value: list[str]) -> list[str]:
        unknown = set(value) - {"uniform", "balanced"}
        if unknown or not value:
            raise ValueError(f"unknown class weight modes: {sorted(unknown)}")
        return value

    @field_validator("grid_n_trees", "grid_max_depth")
    @classmethod
    def _check_grid(cls, value: list[int]) -> list[int]:
        if not value or any(v < 1 for v in value):
            raise ValueError("grid values must be positive integers")
        return value

    @field_validator("log_level")
    @classmethod
    def _check_log_level(cls, value: str) -> str:
        level = value.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {value}")
        return level

    @model_validator(mode="after")
    def _check_timeout(self) -> RunConfig:
        if (self.timeout_us >> TIMESTAMP_UNIT_SHIFT) >= 1 << TIMESTAMP_BITS:
            horizon = (1 << (TIMESTAMP_BITS + TIMESTAMP_UNIT_SHIFT)) - 1
            raise ValueError(f"timeout_us must stay below {horizon} µs")
        if max(self.grid_n_trees) > self.max_trees:
            raise ValueError("grid_n_trees exceeds max_trees")
        if max(self.grid_max_depth) > self.max_depth:
            raise ValueError("grid_max_depth exceeds max_depth")
        return self

    def provenance(self) -> dict[str, Any]:
        """Configuration echoed into every artifact."""
        return self.model_dump(mode="json")


def read_config_file(path: Path) -> dict[str, Any]:
    """Read a TOML run configuration file into a flat mapping."""
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise MalformedConfigError(f"Cannot read run configuration {path}: {e}") from e

    # Allow a single [run] table as well as top-level keys
    if set(data) == {"run"} and isinstance(data["run"], dict):
        data = data["run"]
    return data


def load_run_config(
    config_file: Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Build the validated run configuration.

    ``overrides`` holds command-line values; ``None`` entries are ignored so
    unset flags fall through to the file, the environment and the defaults.
    """
    values: dict[str, Any] = {}
    if config_file is not None:
        values.update(read_config_file(config_file))
        logger.debug(f"Loaded run configuration from {config_file}")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise MalformedConfigError(f"Invalid run configuration: {e}") from e

