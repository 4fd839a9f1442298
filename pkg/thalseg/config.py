"""Run configuration.

One pydantic tree covers every workflow; files are YAML and unknown keys are
rejected with their dotted path. Environment (optionally from `.env`):

- THALSEG_DATABASE_URL: run registry (default: sqlite file under the output dir)
- THALSEG_DEVICE: torch device for training and inference (default: cpu)
- THALSEG_LOG_LEVEL: root log level used by the CLI (default: INFO)
"""
import copy
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import Field, ValidationError, field_validator

from .atlas import FusionParams
from .base import StrictModel
from .curriculum import CurriculumConfig
from .errors import ConfigError
from .models import NetworkSpec
from .phantom import PhantomSpec
from .pipeline import PipelineConfig
from .training import AugmentationPolicy, OptimizerConfig

load_dotenv()

DEFAULT_DEVICE = "cpu"
DEFAULT_LOG_LEVEL = "INFO"


def get_device() -> str:
    return os.getenv("THALSEG_DEVICE", DEFAULT_DEVICE)


def get_log_level() -> str:
    return os.getenv("THALSEG_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


def get_database_url(out_dir: str = ".") -> str:
    return os.getenv("THALSEG_DATABASE_URL", "sqlite:///" + os.path.abspath(os.path.join(out_dir, "thalseg.db")))


class DataConfig(StrictModel):
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    n_cases: int = Field(40, ge=3)
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    pool_cases: int = Field(60, ge=0)
    max_shift: float = Field(1.0, ge=0, le=1)

    @field_validator("split")
    @classmethod
    def _split_sums_to_one(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-6:
            raise ValueError("split ratios must be non-negative and sum to 1")
        return v


class ModelConfig(StrictModel):
    architecture: Literal["dpn", "unet"] = "dpn"
    width: int = Field(56, ge=1)
    levels: int = Field(4, ge=2)
    dropout_rate: float = Field(0.2, ge=0, lt=1)
    coarse_blocks: int = Field(3, ge=1)
    refine_blocks: Tuple[int, ...] = (2, 2, 3)
    convs_per_level: int = Field(1, ge=1)
    modalities: Tuple[str, ...] = ("T1", "WMn")
    ensemble: Literal["none", "atlas", "both"] = "none"

    def network_spec(self, n_labels: int, modalities: Optional[Tuple[str, ...]] = None,
                     architecture: Optional[str] = None) -> NetworkSpec:
        mods = tuple(modalities or self.modalities)
        return NetworkSpec(
            name=architecture or self.architecture,
            input_channels=len(mods),
            output_channels=n_labels + 1,
            width=self.width,
            levels=self.levels,
            dropout_rate=self.dropout_rate,
            coarse_blocks=self.coarse_blocks,
            refine_blocks=self.refine_blocks,
            convs_per_level=self.convs_per_level,
            modalities=mods,
        )


class AuxiliaryConfig(StrictModel):
    """Sizes and budgets of the helper networks."""

    synthesis_width: int = Field(16, ge=1)
    superres_width: int = Field(16, ge=1)
    superres_blocks: int = Field(3, ge=1)
    registration_width: int = Field(8, ge=1)
    autoencoder_latent: int = Field(32, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(epochs=20, steps_per_epoch=20))


class TrainConfig(StrictModel):
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    augmentation: AugmentationPolicy = Field(default_factory=AugmentationPolicy)
    label_weights: Literal["training", "reference"] = "training"
    auxiliary: AuxiliaryConfig = Field(default_factory=AuxiliaryConfig)


class AtlasConfig(StrictModel):
    n_cases: int = Field(20, ge=1)
    fusion: FusionParams = Field(default_factory=FusionParams)
    use_registration: bool = True
    leave_self_out: bool = True
    modality: str = "T1"


class ReportConfig(StrictModel):
    window: float = Field(10.0, gt=0)
    step: float = Field(5.0, gt=0)
    lower_pct: float = Field(5.0, ge=0, le=100)
    upper_pct: float = Field(95.0, ge=0, le=100)
    unit: Literal["mm3", "percent_icv"] = "mm3"
    min_per_sex: int = Field(20, ge=1)


class AblateConfig(StrictModel):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    studies: List[Literal["architecture", "resolution", "modality", "ensemble"]] = Field(
        default_factory=lambda: ["architecture", "resolution", "modality", "ensemble"])
    architectures: List[Literal["dpn", "unet"]] = Field(default_factory=lambda: ["dpn", "unet"])
    modalities: List[Tuple[str, ...]] = Field(default_factory=lambda: [("T1",), ("T1", "WMn")])
    degrade_factor: int = Field(2, ge=2)
    width: int = Field(8, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(epochs=30, steps_per_epoch=10))


class Config(StrictModel):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    atlas: AtlasConfig = Field(default_factory=AtlasConfig)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    ablate: AblateConfig = Field(default_factory=AblateConfig)
    seed: int = 0
    workers: int = Field(1, ge=1)

    def resolved(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(raw: Optional[Dict[str, Any]]) -> Config:
    try:
        return Config.model_validate(raw or {})
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(path, err["msg"]) from exc


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """Defaults, then the YAML file, then `overrides` (nested dict)."""
    raw: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError("--config", f"no such file: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError("--config", f"not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "the config file must hold a mapping")
    return config_from_dict(_merge(raw, overrides or {}))


def dump_config(config: Config, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.resolved(), fh, sort_keys=True)
    return path
