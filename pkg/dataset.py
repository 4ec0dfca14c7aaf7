import logging
from typing import NamedTuple, Optional, Sequence

import numpy as np

import validation
from errors import ConfigError, DataError
from models import SPLIT_NAMES, Sample, SliceLabel, SyntheticConfig
from utils import derive_rng

logger = logging.getLogger(__name__)

SPLIT_RATIO = (4, 1, 1)
TEXTURE_WAVES = 4
PLACEMENT_ATTEMPTS = 100
EDGE_MARGIN = 2


class SplitDataset(NamedTuple):
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


class _Blob(NamedTuple):
    center: tuple[float, float]
    extent: float


def _grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return rows.astype(np.float64), cols.astype(np.float64)


def _texture(rng: np.random.Generator, shape: tuple[int, int], amplitude: float) -> np.ndarray:
    rows, cols = _grid(shape)
    field = np.zeros(shape)
    for _ in range(TEXTURE_WAVES):
        cycles_y, cycles_x = rng.uniform(0.3, 2.5, size=2) * rng.choice([-1.0, 1.0], size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        field += np.cos(2 * np.pi * (cycles_y * rows / shape[0] + cycles_x * cols / shape[1]) + phase)
    return amplitude * field / TEXTURE_WAVES


def _place(
        rng: np.random.Generator,
        shape: tuple[int, int],
        extent: float,
        taken: Sequence[_Blob],
        gap: float
) -> Optional[tuple[float, float]]:
    low = extent + EDGE_MARGIN
    if 2 * low > min(shape) - 1:
        return None
    for _ in range(PLACEMENT_ATTEMPTS):
        center = (rng.uniform(low, shape[0] - 1 - low), rng.uniform(low, shape[1] - 1 - low))
        if all(np.hypot(center[0] - blob.center[0], center[1] - blob.center[1]) > extent + blob.extent + gap
               for blob in taken):
            return center
    return None


def _disc(shape: tuple[int, int], center: tuple[float, float], radius: float) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = _grid(shape)
    distance = np.hypot(rows - center[0], cols - center[1])
    return np.clip(radius + 0.5 - distance, 0.0, 1.0), distance <= radius


def _ring(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    rows, cols = _grid(shape)
    distance = np.hypot(rows - center[0], cols - center[1])
    return np.clip(1.0 - np.abs(distance - radius), 0.0, 1.0)


def _bar(shape: tuple[int, int], center: tuple[float, float], half_length: float, angle: float) -> np.ndarray:
    rows, cols = _grid(shape)
    direction = np.array([np.sin(angle), np.cos(angle)])
    offset_rows, offset_cols = rows - center[0], cols - center[1]
    along = np.clip(offset_rows * direction[0] + offset_cols * direction[1], -half_length, half_length)
    distance = np.hypot(offset_rows - along * direction[0], offset_cols - along * direction[1])
    return np.clip(1.0 - distance, 0.0, 1.0)


def _synthesize(cfg: SyntheticConfig, sample_id: int, positive: bool, rng: np.random.Generator) -> Sample:
    shape = cfg.image_size
    r_min, r_max = cfg.nodule_radius_range
    c_min, c_max = cfg.nodule_contrast_range
    image = cfg.background_level + _texture(rng, shape, cfg.lung_texture)

    blobs: list[_Blob] = []
    truth_masks = []
    if positive:
        count = 2 if rng.random() < cfg.two_nodule_rate else 1
        for _ in range(count):
            radius = rng.uniform(r_min, r_max)
            center = _place(rng, shape, radius, blobs, gap=2.0)
            if center is None:
                continue
            weight, mask = _disc(shape, center, radius)
            image += rng.uniform(c_min, c_max) * weight
            truth_masks.append(mask)
            blobs.append(_Blob(center, radius))

    if rng.random() < cfg.decoy_rate:
        ring = rng.random() < 0.5
        extent = rng.uniform(r_min + 2, r_max + 3) if ring else rng.uniform(1.5 * r_max, 2.5 * r_max) / 2
        center = _place(rng, shape, extent + 1, blobs, gap=3.0)
        if center is not None:
            weight = _ring(shape, center, extent) if ring else _bar(shape, center, extent, rng.uniform(0, np.pi))
            image += rng.uniform(c_min, c_max) * weight

    image += rng.normal(0.0, cfg.noise_sigma, size=shape)
    label = SliceLabel.NODULE if truth_masks else SliceLabel.NO_NODULE
    return Sample(sample_id=sample_id, image=np.clip(image, 0.0, 1.0)[None], label=label, truth_masks=truth_masks)


def generate(cfg: SyntheticConfig, n_pos: int, n_neg: int) -> list[Sample]:
    # positives take ids 0..n_pos-1; sample i draws from its own (seed, i) stream
    if n_pos < 0 or n_neg < 0:
        raise ConfigError(f"sample counts {n_pos}/{n_neg} should not be negative")
    samples = [
        _synthesize(cfg, index, index < n_pos, derive_rng(cfg.seed, index)) for index in range(n_pos + n_neg)
    ]
    logger.info(f"generated {n_pos} positive and {n_neg} negative samples with seed {cfg.seed}")
    return samples


def split_counts(total: int, ratio: Sequence[int] = SPLIT_RATIO) -> list[int]:
    weight = sum(ratio)
    tail = [int(total * part / weight + 0.5) for part in ratio[1:]]
    return [total - sum(tail)] + tail


def split(samples: Sequence[Sample], seed: int, ratio: Sequence[int] = SPLIT_RATIO) -> SplitDataset:
    if len(samples) < 2 * len(ratio):
        raise DataError(f"{len(samples)} samples are too few for a {len(ratio)}-way split")
    labels = [sample.label for sample in samples]
    validation.validate_both_classes(labels, [SliceLabel.NO_NODULE, SliceLabel.NODULE])

    rng = np.random.default_rng(seed)
    parts: list[list[Sample]] = [[] for _ in ratio]
    for label in (SliceLabel.NO_NODULE, SliceLabel.NODULE):
        members = [sample for sample in samples if sample.label == label]
        if len(members) < len(ratio):
            raise DataError(f"class {label.name.lower()} has {len(members)} samples, need at least {len(ratio)}")
        order = rng.permutation(len(members))
        start = 0
        for part, count in zip(parts, split_counts(len(members), ratio)):
            part.extend(members[index] for index in order[start:start + count])
            start += count
    train, val, test = (sorted(part, key=lambda sample: sample.sample_id) for part in parts)
    return SplitDataset(train, val, test)
