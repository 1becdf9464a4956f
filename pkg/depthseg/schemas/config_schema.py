from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger("depthseg")

BlockKind = Literal["residual", "dri"]
GuideKind = Literal["none", "depth", "pseudo_depth"]
LossName = Literal["l2", "l1", "berhu", "multiclass_ce"]
PretrainKind = Literal["none", "denoising", "pseudo_depth"]

DEFAULT_EPOCHS = {"pretrain": 50, "depth": 200, "seg": 100}


class RoiBox(BaseModel):
    """Square optic-nerve-head box, in pixel coordinates of the source image."""

    model_config = ConfigDict(frozen=True)

    center_x: int
    center_y: int
    side: int = Field(gt=0)

    @property
    def x0(self) -> int:
        return self.center_x - self.side // 2

    @property
    def y0(self) -> int:
        return self.center_y - self.side // 2

    @property
    def x1(self) -> int:
        return self.x0 + self.side

    @property
    def y1(self) -> int:
        return self.y0 + self.side

    def fits(self, height: int, width: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height


class CanonicalStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    @field_validator("std")
    @classmethod
    def _positive_std(cls, value):
        for channel, s in enumerate(value):
            if s <= 0:
                raise ValueError(f"canonical std of channel {channel} must be > 0, got {s}")
        return value


class SplitSpec(BaseModel):
    """Immutable fold assignment; fold i is the test fold of round i."""

    model_config = ConfigDict(frozen=True)

    fold_count: int = Field(ge=2)
    fold_assignments: Dict[str, int]
    mode: Literal["kfold", "half"] = "kfold"
    seed: int = 0

    @model_validator(mode="after")
    def _balanced(self):
        sizes = self.fold_sizes()
        if any(f < 0 or f >= self.fold_count for f in self.fold_assignments.values()):
            raise ValueError(f"fold indices must lie in 0..{self.fold_count - 1}")
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValueError(f"folds differ in size by more than 1: {sizes}")
        return self

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.fold_count
        for fold in self.fold_assignments.values():
            if 0 <= fold < self.fold_count:
                sizes[fold] += 1
        return sizes

    def test_ids(self, fold: int) -> List[str]:
        return sorted(i for i, f in self.fold_assignments.items() if f == fold)

    def train_ids(self, fold: int) -> List[str]:
        return sorted(i for i, f in self.fold_assignments.items() if f != fold)


class AugmentPolicy(BaseModel):
    multiplier: int = 10
    hflip_prob: float = Field(default=0.5, ge=0, le=1)
    vflip_prob: float = Field(default=0.5, ge=0, le=1)
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    noise_sigma_max: float = Field(default=0.05, ge=0)
    seed: int = 0

    @field_validator("multiplier")
    @classmethod
    def _multiplier(cls, value):
        if value < 1:
            raise ValueError(f"augmentation multiplier must be >= 1, got {value}")
        return value

    @field_validator("zoom_range")
    @classmethod
    def _zoom(cls, value):
        lo, hi = value
        if lo <= 0 or hi < lo:
            raise ValueError(f"zoom_range must satisfy 0 < low <= high, got {value}")
        return value


class DataConfig(BaseModel):
    resolution: int = Field(default=256, gt=0)
    canonical_id: Optional[str] = None
    canonical_stats: Optional[CanonicalStats] = None
    label_encoding: Literal["index", "grayscale"] = "index"
    augment: AugmentPolicy = AugmentPolicy()


class NetworkConfig(BaseModel):
    input_resolution: int = 256
    in_channels: int = Field(default=3, gt=0)
    base_filters: int = Field(default=64, gt=0)
    max_filters: int = 512
    encoder_levels: int = Field(default=8, gt=0)
    block_kind: BlockKind = "dri"
    dilation_rates: Tuple[int, ...] = (1, 2, 4)
    dropout_levels: int = Field(default=3, ge=0)
    dropout_rate: float = 0.5
    out_channels: int = Field(default=1, gt=0)
    output_activation: Literal["tanh", "softmax"] = "tanh"

    @field_validator("max_filters")
    @classmethod
    def _filter_cap(cls, value):
        if value != 512:
            raise ValueError(f"max_filters is fixed at 512, got {value}")
        return value

    @field_validator("dropout_rate")
    @classmethod
    def _dropout(cls, value):
        if value != 0.5:
            raise ValueError(f"dropout_rate is fixed at 0.5, got {value}")
        return value

    @field_validator("dilation_rates")
    @classmethod
    def _rates(cls, value):
        if not value:
            raise ValueError("dilation_rates must be nonempty")
        if any(b <= a for a, b in zip(value, value[1:])) or value[0] < 1:
            raise ValueError(f"dilation_rates must be positive and strictly increasing, got {value}")
        return value

    @model_validator(mode="after")
    def _resolution(self):
        factor = 2 ** self.encoder_levels
        if self.input_resolution % factor:
            raise ValueError(
                f"input_resolution {self.input_resolution} is not divisible by 2^{self.encoder_levels}={factor}"
            )
        if self.dropout_levels > self.encoder_levels:
            raise ValueError(f"dropout_levels {self.dropout_levels} exceeds encoder_levels {self.encoder_levels}")
        return self

    def filter_schedule(self) -> List[int]:
        return [min(self.base_filters * 2**level, self.max_filters) for level in range(self.encoder_levels)]


class GuidedConfig(BaseModel):
    guide: GuideKind = "depth"
    main_levels: int = 8
    # None: two levels shallower than the main branch (6 of 8)
    guide_levels: Optional[int] = Field(default=None, gt=0)
    guide_channels: int = Field(default=1, gt=0)
    fusion_levels: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def _fusion(self):
        if self.guide_levels is None:
            object.__setattr__(self, "guide_levels", max(1, self.main_levels - 2))
        if self.guide_levels >= self.main_levels:
            raise ValueError(
                f"guide_levels ({self.guide_levels}) must be smaller than main_levels ({self.main_levels})"
            )
        expected = tuple(range(2, self.guide_levels + 1, 2))
        if self.fusion_levels is None:
            object.__setattr__(self, "fusion_levels", expected)
        elif tuple(self.fusion_levels) != expected:
            raise ValueError(f"fusion happens at every alternate guide level {expected}, got {self.fusion_levels}")
        return self

    @property
    def enabled(self) -> bool:
        return self.guide != "none"


class PretrainTask(BaseModel):
    kind: Literal["denoising", "pseudo_depth"]
    noise_sigma: Optional[float] = None

    @model_validator(mode="after")
    def _noise(self):
        if self.kind == "pseudo_depth" and self.noise_sigma is not None:
            raise ValueError("noise_sigma only applies to the denoising pretraining task")
        if self.kind == "denoising":
            if self.noise_sigma is None:
                object.__setattr__(self, "noise_sigma", 0.1)
            elif self.noise_sigma < 0:
                raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        return self


class TrainConfig(BaseModel):
    batch_size: int = 10
    epochs: Optional[int] = None
    learning_rate: float = Field(default=2e-4, ge=0)
    betas: Tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    fine_tune_from: Optional[Path] = None
    resume_from: Optional[Path] = None
    max_steps: Optional[int] = Field(default=None, gt=0)
    early_stop_patience: int = Field(default=20, gt=0)
    plateau_patience: int = Field(default=10, gt=0)
    plateau_factor: float = Field(default=0.5, gt=0, lt=1)
    checkpoint_every: int = Field(default=1, gt=0)
    device: str = "cpu"

    @field_validator("batch_size")
    @classmethod
    def _batch(cls, value):
        if value < 1:
            raise ValueError(f"batch_size must be >= 1, got {value}")
        return value

    def epochs_for(self, task: str) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[task]


class CrfParams(BaseModel):
    w1: float = Field(default=5.0, ge=0)
    w2: float = Field(default=5.0, ge=0)
    w3: float = Field(default=3.0, ge=0)
    theta_alpha: float = Field(default=30.0, gt=0)
    theta_beta: float = Field(default=10.0, gt=0)
    theta_gamma: float = Field(default=0.1, gt=0)
    theta_smooth: Optional[float] = Field(default=None, gt=0)
    iterations: int = Field(default=10, ge=0)
    # lattice spacing in bandwidth units; the splat and slice variance must stay below one
    lattice_step: float = Field(default=1.0, gt=0, lt=3**0.5)
    max_exact_pixels: int = Field(default=64 * 64, gt=0)

    @property
    def smooth_bandwidth(self) -> float:
        return self.theta_alpha if self.theta_smooth is None else self.theta_smooth


# subcommands that build or train a network from the run configuration
NETWORK_SUBCOMMANDS = frozenset({"pretrain", "train-depth", "train-seg"})


class RunConfig(BaseModel):
    subcommand: str
    manifests: List[Path] = []
    out_dir: Path = Path("runs/latest")
    seed: int = 0
    loss: LossName = "l2"
    pretrain: PretrainKind = "none"
    noise_sigma: Optional[float] = Field(default=None, ge=0)
    tau: float = Field(default=0.5, gt=0, lt=1)
    use_crf: bool = False
    dry_run: bool = False
    data: DataConfig = DataConfig()
    network: NetworkConfig = NetworkConfig()
    guided: GuidedConfig = GuidedConfig()
    train: TrainConfig = TrainConfig()
    crf: CrfParams = CrfParams()

    @model_validator(mode="after")
    def _consistent(self):
        if self.subcommand in NETWORK_SUBCOMMANDS and self.data.resolution != self.network.input_resolution:
            raise ValueError(
                f"data.resolution={self.data.resolution} and network.input_resolution="
                f"{self.network.input_resolution} must agree"
            )
        if self.guided.main_levels != self.network.encoder_levels:
            raise ValueError(
                f"guided.main_levels={self.guided.main_levels} and network.encoder_levels="
                f"{self.network.encoder_levels} must agree"
            )
        return self

    def pretrain_task(self) -> Optional[PretrainTask]:
        if self.pretrain == "none":
            return None
        sigma = self.noise_sigma if self.pretrain == "denoising" else None
        return PretrainTask(kind=self.pretrain, noise_sigma=sigma)

    def write_frozen(self, out_dir: Optional[Path] = None) -> Path:
        out_dir = Path(out_dir or self.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "run_config.yaml"
        with open(path, "w") as fh:
            yaml.safe_dump(self.model_dump(mode="json"), fh, sort_keys=True)
        logger.info(f"Resolved config written to {path}")
        return path


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def load_run_config(config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Resolve a RunConfig: defaults < YAML file < explicit overrides (None means "not given")."""
    values: Dict[str, Any] = {}
    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        with open(config_path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"Config file {config_path} must contain a mapping, got {type(loaded).__name__}")
        values = loaded
        logger.info(f"Loaded config file {config_path}")
    values = _deep_merge(values, overrides or {})
    return RunConfig(**values)
