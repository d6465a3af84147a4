"""Run configuration: defaults < JSON file < MOECARVE_* environment < CLI flags."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .grouping import MoeConfig

ENV_PREFIX = "MOECARVE_"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_experts: int = 8
    n_shared: int = 1
    n_routed: int = 7
    n_active: int = 1
    expert_size: int = 0
    k_a: int = Field(10, ge=1)
    gamma: float = Field(0.001, gt=0)
    max_kmeans_iters: int = Field(100, ge=1)
    normalize: bool = True
    seed: int = 0

    weights: Optional[str] = None
    calib: Optional[str] = None
    profile: Optional[str] = None
    moe: Optional[str] = None
    out: Optional[str] = None
    mode: Literal["binary", "scaled", "generic"] = "binary"
    steps: int = Field(200, ge=0)
    histogram_bins: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _check_moe(self):
        self.moe_config()
        for name in ("weights", "calib", "profile", "moe", "out"):
            if getattr(self, name) == "":
                raise ValueError(f"{name} must be a non-empty path")
        return self

    def moe_config(self) -> MoeConfig:
        return MoeConfig(**{k: getattr(self, k) for k in MoeConfig.__dataclass_fields__})

    def require(self, *names: str) -> None:
        missing = [n for n in names if not getattr(self, n)]
        if missing:
            raise ValueError(f"missing required setting(s): {', '.join(missing)}")


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key in RunConfig.model_fields:
        val = environ.get(ENV_PREFIX + key.upper())
        if val is not None:
            out[key] = val
    return out


def load_run_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    data: dict = {}
    if path:
        data.update(json.loads(Path(path).read_text()))
    data.update(env_overrides(environ))
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.model_validate(data)
