from enum import Enum
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, validator

from errors import ConfigError, DataError

DEFAULT_LEARNING_RATES = {1: 1e-2, 2: 2e-3, 3: 1e-3}
SPLIT_NAMES = ("train", "val", "test")


class SliceLabel(Enum):
    NO_NODULE = 0
    NODULE = 1


class ScopeKind(Enum):
    ONE_GAP_C1 = "C1"
    MULTI_GAP_CMULTI = "Cmulti"


class SegmentationStatus(Enum):
    NODULE = "nodule"
    NO_NODULE = "no_nodule"
    DETECTION_FAILED = "detection_failed"


def _split_list(value):
    if isinstance(value, str):
        return [item for item in value.replace(" ", "").split(",") if item]
    return value


def _pair(value):
    if isinstance(value, (int, str)) and not isinstance(value, bool):
        items = _split_list(str(value))
        return (items[0], items[0]) if len(items) == 1 else tuple(items)
    return value


class ModelConfig(BaseModel):
    input_size: tuple[int, int] = (64, 64)
    stage_channels: list[int] = [16, 32, 64]
    gap_taps: list[int] = [2]
    head_channels: int = 32
    num_classes: int = 2
    head_lr_multiplier: float = 10.0

    _parse_input_size = validator('input_size', pre=True, allow_reuse=True)(_pair)
    _parse_lists = validator('stage_channels', 'gap_taps', pre=True, allow_reuse=True)(_split_list)

    @validator('stage_channels')
    def stages_fit_input(cls, v, values):
        if not v or any(channels < 1 for channels in v):
            raise ConfigError("stage_channels should be a non-empty list of positive counts")
        if "input_size" in values:
            factor = 2 ** len(v)
            height, width = values["input_size"]
            if height < factor or width < factor or height % factor or width % factor:
                raise ConfigError(f"input size {height}x{width} is not divisible by {factor} for {len(v)} stages")
        return v

    @validator('gap_taps')
    def taps_strictly_increasing(cls, v, values):
        if not v:
            raise ConfigError("gap_taps should name at least one stage")
        if any(later <= earlier for earlier, later in zip(v, v[1:])):
            raise ConfigError(f"gap_taps {v} should be strictly increasing")
        stages = len(values.get("stage_channels") or [])
        if any(tap < 0 or tap >= stages for tap in v):
            raise ConfigError(f"gap_taps {v} should be stage indices in [0, {stages})")
        return v

    @validator('head_channels')
    def head_channels_positive(cls, v):
        if v < 1:
            raise ConfigError("head_channels should be positive")
        return v

    @validator('num_classes')
    def two_classes(cls, v):
        if v != 2:
            raise ConfigError("num_classes should be 2 (nodule / no nodule)")
        return v

    @validator('head_lr_multiplier')
    def multiplier_not_negative(cls, v):
        if v < 0:
            raise ConfigError("head_lr_multiplier should not be negative")
        return v

    @classmethod
    def with_gap_count(cls, gap_count: int, **kwargs) -> "ModelConfig":
        stages = len(kwargs.get("stage_channels", cls.__fields__["stage_channels"].default))
        return cls(gap_taps=list(range(stages - gap_count, stages)), **kwargs)

    @property
    def feature_length(self) -> int:
        return self.head_channels * len(self.gap_taps)


class TrainConfig(BaseModel):
    initial_lr: float = DEFAULT_LEARNING_RATES[1]
    lr_decay_per_epoch: float = 0.99
    momentum: float = 0.9
    batch_size: int = 30
    epochs: int = 6
    seed: int = 0
    backbone_lr_multiplier: float = 1.0

    @validator('initial_lr')
    def lr_positive(cls, v):
        if v <= 0:
            raise ConfigError("initial_lr should be positive")
        return v

    @validator('lr_decay_per_epoch')
    def decay_in_range(cls, v):
        if not 0 < v <= 1:
            raise ConfigError("lr_decay_per_epoch should be in (0, 1]")
        return v

    @validator('momentum')
    def momentum_in_range(cls, v):
        if not 0 <= v < 1:
            raise ConfigError("momentum should be in [0, 1)")
        return v

    @validator('batch_size', 'epochs')
    def at_least_one(cls, v, field):
        if v < 1:
            raise ConfigError(f"{field.name} should be at least 1")
        return v

    @validator('backbone_lr_multiplier')
    def backbone_multiplier_not_negative(cls, v):
        if v < 0:
            raise ConfigError("backbone_lr_multiplier should not be negative")
        return v

    @classmethod
    def for_gap_count(cls, gap_count: int, **overrides) -> "TrainConfig":
        settings = {"initial_lr": DEFAULT_LEARNING_RATES.get(gap_count, DEFAULT_LEARNING_RATES[3])}
        settings.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**settings)


class IcmConfig(BaseModel):
    phases: int = 4
    beta: Optional[float] = None
    beta_scale: float = 0.25
    beta_cap: float = 1.0
    max_iters: int = 50
    window_margin: int = 8

    @validator('phases')
    def at_least_two_phases(cls, v):
        if v < 2:
            raise ConfigError("phases should be at least 2")
        return v

    @validator('beta', 'beta_scale', 'beta_cap')
    def smoothness_not_negative(cls, v, field):
        if v is not None and v < 0:
            raise ConfigError(f"{field.name} should not be negative")
        return v

    @validator('max_iters')
    def at_least_one_sweep(cls, v):
        if v < 1:
            raise ConfigError("max_iters should be at least 1")
        return v

    @validator('window_margin')
    def margin_not_negative(cls, v):
        if v < 0:
            raise ConfigError("window_margin should not be negative")
        return v


class SegmentConfig(BaseModel):
    icm: IcmConfig = IcmConfig()
    scope_threshold: float = 0.4
    min_area: int = 4
    fill_value: float = 0.2
    coarse_only: bool = False
    two_nodule: bool = False

    @validator('scope_threshold')
    def threshold_in_range(cls, v):
        if not 0 <= v <= 1:
            raise ConfigError("scope_threshold should be in [0, 1]")
        return v

    @validator('min_area')
    def min_area_positive(cls, v):
        if v < 1:
            raise ConfigError("min_area should be at least 1")
        return v


class SyntheticConfig(BaseModel):
    image_size: tuple[int, int] = (64, 64)
    background_level: float = 0.2
    noise_sigma: float = 0.05
    lung_texture: float = 0.05
    nodule_radius_range: tuple[float, float] = (3.0, 9.0)
    nodule_contrast_range: tuple[float, float] = (0.25, 0.6)
    decoy_rate: float = 0.3
    two_nodule_rate: float = 0.01
    seed: int = 42

    _parse_pairs = validator(
        'image_size', 'nodule_radius_range', 'nodule_contrast_range', pre=True, allow_reuse=True
    )(_pair)

    @validator('noise_sigma', 'lung_texture')
    def amplitude_not_negative(cls, v, field):
        if v < 0:
            raise ConfigError(f"{field.name} should not be negative")
        return v

    @validator('nodule_radius_range')
    def radius_fits_image(cls, v, values):
        r_min, r_max = v
        if r_min < 2 or r_max < r_min:
            raise ConfigError(f"nodule_radius_range {v} should satisfy 2 <= r_min <= r_max")
        if "image_size" in values and 2 * r_max + 6 > min(values["image_size"]):
            raise ConfigError(f"nodule radius {r_max} is too large for image {values['image_size']}")
        return v

    @validator('nodule_contrast_range')
    def contrast_positive(cls, v):
        if v[0] <= 0 or v[1] < v[0]:
            raise ConfigError(f"nodule_contrast_range {v} should satisfy 0 < c_min <= c_max")
        return v

    @validator('decoy_rate', 'two_nodule_rate')
    def rate_in_range(cls, v, field):
        if not 0 <= v <= 1:
            raise ConfigError(f"{field.name} should be in [0, 1]")
        return v


class LabeledImage(NamedTuple):
    image: np.ndarray
    label: SliceLabel


class Sample(BaseModel):
    sample_id: int
    image: np.ndarray
    label: SliceLabel
    truth_masks: list[np.ndarray] = []

    class Config:
        arbitrary_types_allowed = True

    @validator('truth_masks')
    def masks_match_label(cls, v, values):
        if "label" in values and (values["label"] == SliceLabel.NODULE) != bool(v):
            raise DataError(f"sample {values.get('sample_id')} label disagrees with its truth masks")
        for i, first in enumerate(v):
            for second in v[i + 1:]:
                if np.any(first & second):
                    raise DataError(f"sample {values.get('sample_id')} has overlapping truth masks")
        return v

    def labeled(self) -> LabeledImage:
        return LabeledImage(self.image, self.label)


class Classification(BaseModel):
    label: SliceLabel
    probability: float
    nodule_probability: float


class Nam(BaseModel):
    map: np.ndarray
    raw_maps: list[np.ndarray]
    score: float

    class Config:
        arbitrary_types_allowed = True


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0, 0, -1, -1
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


class Scope(BaseModel):
    mask: np.ndarray
    kind: ScopeKind
    peak: tuple[int, int]
    peak_value: float

    class Config:
        arbitrary_types_allowed = True

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return mask_bbox(self.mask)


class Candidate(BaseModel):
    mask: np.ndarray
    area: int
    bbox: tuple[int, int, int, int]

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Candidate":
        return cls(mask=mask, area=int(mask.sum()), bbox=mask_bbox(mask))


class IcmResult(BaseModel):
    labels: np.ndarray
    window: tuple[int, int, int, int]
    means: np.ndarray
    beta: float
    energies: list[float]

    class Config:
        arbitrary_types_allowed = True

    @property
    def brightest_phase(self) -> int:
        return int(np.argmax(self.means))


class Selection(BaseModel):
    candidate: Candidate
    index: int
    scores: list[float]


class SliceSegmentation(BaseModel):
    status: SegmentationStatus
    probability: float
    masks: list[np.ndarray] = []
    scope_kinds: list[ScopeKind] = []
    candidate_counts: list[int] = []
    selected_indices: list[int] = []
    detail: str = ""
    nam: Optional[Nam] = None
    icm_results: list[IcmResult] = []

    class Config:
        arbitrary_types_allowed = True


class EpochLog(BaseModel):
    epoch: int
    learning_rate: float
    train_loss: float
    validation_accuracy: float


class SliceResult(BaseModel):
    slice_id: int
    label: SliceLabel
    truth_masks: list[np.ndarray] = []
    pred_masks: list[np.ndarray] = []

    class Config:
        arbitrary_types_allowed = True


class MetricsReport(BaseModel):
    name: str = ""
    tpr: float
    fpr: float
    fpr_nodule: float
    dice_mean: float
    dice_sd: float
    tp_dice_mean: float
    tp_dice_sd: float
    tp_doa_mean: float
    tp_doa_sd: float
    n_slices: int
    n_positive: int
    n_negative: int
    n_detected: int
    n_true_positive_nodules: int
    n_two_nodule: int = 0
    both_detected: int = 0
    one_detected: int = 0

    @validator('tpr', 'fpr', 'fpr_nodule', 'dice_mean', 'tp_dice_mean')
    def rate_in_unit_interval(cls, v, field):
        if not 0 <= v <= 1:
            raise DataError(f"{field.name} {v} is outside [0, 1]")
        return v


class SizeBin(BaseModel):
    lower: float
    upper: float
    n_nodules: int
    tp_dice_mean: float
    tp_dice_sd: float
    tp_doa_mean: float
    tp_doa_sd: float


def _existing_path(value: Path) -> Path:
    if not Path(value).exists():
        raise DataError(f"{value} is not found")
    return value


def _known_split(value: str) -> str:
    if value not in SPLIT_NAMES:
        raise ConfigError(f"split {value!r} should be one of {', '.join(SPLIT_NAMES)}")
    return value


class SynthRunConfig(BaseModel):
    seed: int
    out: Path
    pos: int = 100
    neg: int = 100
    image_size: int = 64
    background_level: float = 0.2
    noise_sigma: float = 0.05
    lung_texture: float = 0.05
    radius_min: float = 3.0
    radius_max: float = 9.0
    contrast_min: float = 0.25
    contrast_max: float = 0.6
    decoy_rate: float = 0.3
    two_nodule_rate: float = 0.01

    @validator('pos', 'neg')
    def count_not_negative(cls, v, field):
        if v < 0:
            raise ConfigError(f"{field.name} should not be negative")
        return v

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            image_size=(self.image_size, self.image_size),
            background_level=self.background_level,
            noise_sigma=self.noise_sigma,
            lung_texture=self.lung_texture,
            nodule_radius_range=(self.radius_min, self.radius_max),
            nodule_contrast_range=(self.contrast_min, self.contrast_max),
            decoy_rate=self.decoy_rate,
            two_nodule_rate=self.two_nodule_rate,
            seed=self.seed,
        )


class TrainRunConfig(BaseModel):
    data: Path
    out: Path
    seed: int
    gap_taps: list[int] = [2]
    stage_channels: list[int] = [16, 32, 64]
    head_channels: int = 32
    head_lr_multiplier: float = 10.0
    initial_lr: Optional[float] = None
    lr_decay: float = 0.99
    momentum: float = 0.9
    batch_size: int = 30
    epochs: int = 6

    _parse_lists = validator('stage_channels', 'gap_taps', pre=True, allow_reuse=True)(_split_list)
    _check_data = validator('data', allow_reuse=True)(_existing_path)

    def model_config(self, input_size: tuple[int, int]) -> ModelConfig:
        return ModelConfig(
            input_size=input_size,
            stage_channels=self.stage_channels,
            gap_taps=self.gap_taps,
            head_channels=self.head_channels,
            head_lr_multiplier=self.head_lr_multiplier,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig.for_gap_count(
            len(self.gap_taps),
            initial_lr=self.initial_lr,
            lr_decay_per_epoch=self.lr_decay,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )


class SegmentRunConfig(BaseModel):
    data: Path
    out: Path
    one_gap: Path
    multi_gap: Optional[Path] = None
    split: str = "test"
    coarse_only: bool = False
    two_nodule: bool = False
    scope_threshold: float = 0.4
    min_area: int = 4
    phases: int = 4
    beta: Optional[float] = None
    max_iters: int = 50
    window_margin: int = 8
    dump_nam: bool = False
    dump_labels: bool = False
    pbm: bool = False

    _check_paths = validator('data', 'one_gap', 'multi_gap', allow_reuse=True)(_existing_path)
    _check_split = validator('split', allow_reuse=True)(_known_split)

    def segment_config(self, fill_value: float) -> SegmentConfig:
        return SegmentConfig(
            icm=IcmConfig(
                phases=self.phases, beta=self.beta, max_iters=self.max_iters, window_margin=self.window_margin
            ),
            scope_threshold=self.scope_threshold,
            min_area=self.min_area,
            fill_value=fill_value,
            coarse_only=self.coarse_only,
            two_nodule=self.two_nodule,
        )


class EvalRunConfig(BaseModel):
    data: Path
    pred: Path
    out: Path
    split: str = "test"
    name: str = "run"
    px_to_mm2: float = 1.0
    size_bins: list[float] = [6.0, 9.0, 12.0, 15.0]
    detection_margin: int = 2

    _parse_bins = validator('size_bins', pre=True, allow_reuse=True)(_split_list)
    _check_paths = validator('data', 'pred', allow_reuse=True)(_existing_path)
    _check_split = validator('split', allow_reuse=True)(_known_split)

    @validator('px_to_mm2')
    def scale_positive(cls, v):
        if v <= 0:
            raise ConfigError("px_to_mm2 should be positive")
        return v

    @validator('detection_margin')
    def margin_not_negative(cls, v):
        if v < 0:
            raise ConfigError("detection_margin should not be negative")
        return v
