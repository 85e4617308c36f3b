"""
Configuration models and runtime settings.

Option groups are pydantic models so every invariant is checked once at
construction; process-wide settings come from the environment (.env aware).
"""

import os
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from oscar_kv.errors import DimensionError


DEFAULT_CLIP_GRID = [0.88, 0.92, 0.96, 0.98, 1.0]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class QuantConfig(BaseModel):
    """
    Per-group affine quantizer settings for one cache side (K or V).
    """

    model_config = ConfigDict(frozen=True)

    bits: int = Field(default=2, ge=1, le=8)
    group_size: int = Field(default=128, ge=1)
    clip_ratio: float = Field(default=1.0, gt=0.0, le=1.0)
    scale_floor: float = Field(default=1e-8, gt=0.0)
    bf16_meta: bool = False
    # identity quantizer: rows are stored exactly (pipeline soundness checks)
    passthrough: bool = False

    @property
    def q_max(self) -> int:
        return (1 << self.bits) - 1

    def groups_for(self, dim: int) -> int:
        """Number of groups in a row of width dim; raises if G does not divide it."""
        if dim % self.group_size != 0:
            raise DimensionError(
                f"group size {self.group_size} does not divide row width {dim}"
            )
        return dim // self.group_size

    def packed_bytes(self, dim: int) -> int:
        return (dim * self.bits + 7) // 8


class CacheLayout(BaseModel):
    """Sink and recent-window lengths of the mixed-precision cache."""

    model_config = ConfigDict(frozen=True)

    sink: int = Field(default=64, ge=0)
    recent: int = Field(default=256, ge=0)

    @property
    def protected(self) -> int:
        return self.sink + self.recent


class CalibrationOptions(BaseModel):
    """
    Options of the offline calibration pass.
    """

    model_config = ConfigDict(frozen=True)

    bits: int = Field(default=2, ge=1, le=8)
    group_size_k: int = Field(default=128, ge=1)
    group_size_v: int = Field(default=128, ge=1)
    clip_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_CLIP_GRID))
    share_heads: bool = False
    per_layer_clip: bool = True
    target: Literal["attention", "raw"] = "attention"
    causal: bool = True
    softmax_block: int = Field(default=1024, ge=1)
    n_jobs: int = 1
    scale_floor: float = Field(default=1e-8, gt=0.0)

    @field_validator("clip_grid")
    @classmethod
    def _grid_in_range(cls, grid: List[float]) -> List[float]:
        for ratio in grid:
            if not 0.0 < ratio <= 1.0:
                raise ValueError(f"clip ratio {ratio} outside (0, 1]")
        return grid

    def quant_config(self, side: Literal["k", "v"], clip_ratio: float = 1.0) -> QuantConfig:
        group = self.group_size_k if side == "k" else self.group_size_v
        return QuantConfig(
            bits=self.bits,
            group_size=group,
            clip_ratio=clip_ratio,
            scale_floor=self.scale_floor,
        )


class SynthConfig(BaseModel):
    """
    Shape of a synthetic activation dump.

    Queries and keys share a power-law spectrum in a per-head random basis;
    a few key channels are scaled up to plant per-channel outliers.
    """

    model_config = ConfigDict(frozen=True)

    tokens: int = Field(default=512, ge=1)
    head_dim: int = Field(default=128, ge=1)
    layers: int = Field(default=2, ge=1)
    kv_heads: int = Field(default=2, ge=1)
    gqa_ratio: int = Field(default=4, ge=1)
    outlier_channels: int = Field(default=4, ge=0)
    outlier_scale: float = Field(default=4.0, gt=0.0)
    spectrum_decay: float = Field(default=1.5, ge=0.0)
    query_scale: float = Field(default=0.5, gt=0.0)
    seed: int = 7

    @field_validator("head_dim")
    @classmethod
    def _dim_power_of_two(cls, d: int) -> int:
        if not is_power_of_two(d):
            raise ValueError(f"head_dim must be a power of two, got {d}")
        return d

    @field_validator("outlier_channels")
    @classmethod
    def _outliers_below_dim(cls, n: int, info) -> int:
        d = info.data.get("head_dim")
        if d is not None and n >= d:
            raise ValueError(f"outlier_channels ({n}) must be below head_dim ({d})")
        return n


class RuntimeSettings(BaseModel):
    """Process-wide knobs read from the environment."""

    log_level: str = "INFO"
    n_jobs: int = 1
    softmax_block: int = Field(default=1024, ge=1)


def load_settings() -> RuntimeSettings:
    """
    Load runtime settings from the environment (and a .env file if present).
    """
    load_dotenv()
    return RuntimeSettings(
        log_level=os.getenv("OSCAR_LOG_LEVEL", "INFO").upper(),
        n_jobs=int(os.getenv("OSCAR_N_JOBS", "1")),
        softmax_block=int(os.getenv("OSCAR_SOFTMAX_BLOCK", "1024")),
    )


RotationMode = Literal[
    "oscar", "hadamard", "eigen", "none", "naive",
    "no-pbr", "no-hadamard", "hadamard-pbr", "passthrough",
]
ROTATION_MODES = list(RotationMode.__args__)


class EvalOptions(BaseModel):
    """
    Evaluation run settings; unset fields fall back to the bundle's values.
    """

    model_config = ConfigDict(frozen=True)

    mode: RotationMode = "oscar"
    bits: Optional[int] = Field(default=None, ge=1, le=8)
    group_size: Optional[int] = Field(default=None, ge=1)
    clip_ratio: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    bf16_meta: bool = False
    prefill_tokens: Optional[int] = Field(default=None, ge=1)
    context_length: Optional[int] = Field(default=None, ge=1)
