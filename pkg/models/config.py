import json
from pathlib import Path
from typing import Optional, Tuple, List

from pydantic import BaseModel, ConfigDict, Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from models.errors import InvalidInputError
from models.schemas import (
    AffineSpec, CutoutSpec, DistanceLoss, PhantomSpec, PoseLossParams,
    SamplerConfig, VoiSpec, Vec3,
)


class AnchorSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_sizes_mm: List[Vec3] = Field(default_factory=lambda: [(6.0, 6.0, 6.0), (8.0, 8.0, 8.0), (11.0, 11.0, 11.0)])
    stride_mm: Vec3 = (2.0, 2.0, 2.0)


class DetectionSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nms_iou: float = Field(0.5, ge=0.0, le=1.0)
    margin_mm: float = Field(2.0, ge=0.0)
    # off = single-class ablation
    grouped: bool = True


class DistanceSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_max_vox: float = Field(20.0, gt=0.0)
    tau_vox: float = Field(0.5, ge=0.0)
    crop_dims: Tuple[int, int, int] = (64, 64, 128)


class NetworkSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    groups: int = Field(4, ge=1)
    alpha: float = Field(0.1, ge=0.0)
    loss: DistanceLoss = DistanceLoss.DISTANCE
    toy_widths: Tuple[int, int, int, int] = (4, 8, 16, 32)
    toy_dims: Tuple[int, int, int] = (16, 16, 32)
    toy_steps: int = Field(200, ge=1)
    toy_lr: float = Field(0.05, gt=0.0)
    gradcheck_samples: int = Field(50, ge=1)
    gradcheck_tolerance: float = Field(1e-4, gt=0.0)


class PipelineConfig(BaseSettings):
    """Every tunable of the toolkit; defaults are the documented decisions."""

    model_config = SettingsConfigDict(
        env_prefix="TOOTHKIT_",
        env_nested_delimiter="__",
        env_file=".env",
        extra="forbid",
    )

    seed: int = Field(0, ge=0)
    voi: VoiSpec = Field(default_factory=VoiSpec)
    pose_loss: PoseLossParams = Field(default_factory=PoseLossParams)
    cutout: CutoutSpec = Field(default_factory=CutoutSpec)
    affine: AffineSpec = Field(default_factory=AffineSpec)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    anchors: AnchorSettings = Field(default_factory=AnchorSettings)
    detection: DetectionSettings = Field(default_factory=DetectionSettings)
    distance: DistanceSettings = Field(default_factory=DistanceSettings)
    network: NetworkSettings = Field(default_factory=NetworkSettings)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)


def load_config(path: Optional[str] = None, seed: Optional[int] = None) -> PipelineConfig:
    """Defaults < environment/.env < JSON file < explicit seed flag."""
    overrides = {}
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise InvalidInputError(f"config file not found: {path}")
        try:
            overrides = json.loads(config_path.read_text())
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"config file is not valid JSON: {e}")
        if not isinstance(overrides, dict):
            raise InvalidInputError("config file must hold a JSON object")
    if seed is not None:
        overrides["seed"] = seed
    return PipelineConfig(**overrides)
