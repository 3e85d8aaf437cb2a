from __future__ import annotations

import os
from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class LabSettings(BaseSettings):
    """
    Environment-driven process settings (resource cap, logging, parallelism).
    """

    model_config = SettingsConfigDict(env_prefix="", env_file=".env", extra="ignore")

    # ---- Resources ----
    # Largest dense matrix dimension any cube may assemble or diagonalize.
    max_dimension: int = Field(default=6000, alias="MSALAB_MAX_DIMENSION")

    # ---- Logging ----
    log_level: str = Field(default="INFO", alias="MSALAB_LOG_LEVEL")

    # ---- Parallelism ----
    # 0 means "use all available cores"
    default_workers: int = Field(default=0, alias="MSALAB_WORKERS")


@lru_cache(maxsize=1)
def load_settings() -> LabSettings:
    """Read once per process; call load_settings.cache_clear() to pick up a changed environment."""
    return LabSettings()


def max_dimension() -> int:
    return load_settings().max_dimension


def resolve_workers(requested: int | None) -> int:
    """Worker count: explicit request, then MSALAB_WORKERS, then os.cpu_count()."""
    if requested is not None and requested > 0:
        return requested
    configured = load_settings().default_workers
    if configured > 0:
        return configured
    return os.cpu_count() or 1
