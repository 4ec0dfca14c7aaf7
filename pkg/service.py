import csv
import logging
from pathlib import Path

import numpy as np

import dataset
import dataset_io
import evaluation
import nam
import network
import network_storage
import network_training
import validation
from errors import FormatError
from models import (
    EvalRunConfig, IcmResult, SegmentationStatus, SegmentRunConfig, SliceLabel, SliceSegmentation, SynthRunConfig,
    TrainRunConfig
)
from segmentation import segment_slice
from utils import format_value, write_manifest

logger = logging.getLogger(__name__)

WEIGHTS_FILE = "model.nsw"
TRAIN_LOG_FILE = "train_log.csv"
DECISIONS_FILE = "decisions.log"
METRICS_FILE = "metrics.csv"
SIZE_BINS_FILE = "size_bins.csv"
MASKS_DIR = "masks"


def cmd_synth(cfg: SynthRunConfig) -> Path:
    synthetic = cfg.synthetic_config()
    samples = dataset.generate(synthetic, cfg.pos, cfg.neg)
    parts = dataset.split(samples, cfg.seed)
    dataset_io.write_dataset(cfg.out, samples, parts, synthetic)
    logger.info(f"dataset split {len(parts.train)}/{len(parts.val)}/{len(parts.test)} written to {cfg.out}")
    return cfg.out


def _labeled(directory: Path, split: str):
    return [sample.labeled() for sample in dataset_io.read_dataset(directory, split).samples]


def cmd_train(cfg: TrainRunConfig) -> Path:
    config = dataset_io.read_config(cfg.data)
    model_config = cfg.model_config(config.image_size)
    train_config = cfg.train_config()
    train_set = _labeled(cfg.data, "train")
    validation_set = _labeled(cfg.data, "val")

    model = network.build(model_config, cfg.seed)
    result = network_training.train(model, train_set, train_config, validation_set)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    network_storage.save(result.model, out / WEIGHTS_FILE)
    with open(out / TRAIN_LOG_FILE, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("epoch", "learning_rate", "train_loss", "validation_accuracy"))
        writer.writerows(
            (entry.epoch, format_value(entry.learning_rate), format_value(entry.train_loss),
             format_value(entry.validation_accuracy))
            for entry in result.log
        )

    test_set = _labeled(cfg.data, "test")
    extra = {"best_epoch": result.best_epoch}
    if test_set:
        images, labels = network_training.stack_labeled(test_set)
        extra["test_accuracy"] = network_training.accuracy(result.model, images, labels)
        logger.info(f"test accuracy {extra['test_accuracy']:.4f}")
    write_manifest(out, cfg, model_config, train_config, **extra)
    logger.info(f"weights written to {out / WEIGHTS_FILE}")
    return out


def _decision_line(sample_id: int, segmentation: SliceSegmentation) -> str:
    classified = "no_nodule" if segmentation.status == SegmentationStatus.NO_NODULE else "nodule"
    fields = {
        "classified": classified,
        "probability": f"{segmentation.probability:.6f}",
        "status": segmentation.status.value,
        "scope": format_value(segmentation.scope_kinds) or "-",
        "candidates": format_value(segmentation.candidate_counts) or "-",
        "selected": format_value(segmentation.selected_indices) or "-",
    }
    return dataset_io.file_stem(sample_id) + " " + " ".join(f"{key}={value}" for key, value in fields.items())


def _label_map(icm: IcmResult, shape: tuple[int, int]) -> np.ndarray:
    # -1 outside the ICM window
    labels = np.full(shape, -1, dtype=np.int64)
    r0, r1, c0, c1 = icm.window
    labels[r0:r1, c0:c1] = icm.labels
    return labels


def _write_dumps(out: Path, stem: str, segmentation: SliceSegmentation, cfg: SegmentRunConfig):
    if cfg.pbm:
        for index, mask in enumerate(segmentation.masks):
            dataset_io.write_pbm(mask, out / MASKS_DIR / f"{stem}_{index}.pbm")
    if cfg.dump_nam and segmentation.nam is not None:
        (out / "nam").mkdir(exist_ok=True)
        nam.write_nam(segmentation.nam, out / "nam" / f"{stem}.txt")
    if cfg.dump_labels and segmentation.icm_results:
        (out / "labels").mkdir(exist_ok=True)
        shape = segmentation.nam.map.shape
        for index, icm in enumerate(segmentation.icm_results):
            np.savetxt(out / "labels" / f"{stem}_{index}.txt", _label_map(icm, shape), fmt="%d")


def _clear_masks(masks_dir: Path):
    # masks from an earlier run would be read back as predictions
    stale = [*masks_dir.glob("*.masks"), *masks_dir.glob("*.pbm")]
    for path in stale:
        path.unlink()
    if stale:
        logger.info(f"removed {len(stale)} stale mask files from {masks_dir}")


def cmd_segment(cfg: SegmentRunConfig) -> Path:
    one_gap_model = network_storage.load(cfg.one_gap)
    multi_gap_model = network_storage.load(cfg.multi_gap) if cfg.multi_gap is not None else None
    data = dataset_io.read_dataset(cfg.data, cfg.split)
    segment_config = cfg.segment_config(fill_value=data.config.background_level)

    out = Path(cfg.out)
    (out / MASKS_DIR).mkdir(parents=True, exist_ok=True)
    _clear_masks(out / MASKS_DIR)
    decisions = []
    for sample in data.samples:
        validation.validate_image_size(sample.image.shape, one_gap_model.config.input_size)
        segmentation = segment_slice(one_gap_model, sample.image, segment_config, multi_gap_model)
        stem = dataset_io.file_stem(sample.sample_id)
        if segmentation.masks:
            dataset_io.write_masks(
                segmentation.masks, one_gap_model.config.input_size, out / MASKS_DIR / f"{stem}.masks"
            )
        _write_dumps(out, stem, segmentation, cfg)
        decisions.append(_decision_line(sample.sample_id, segmentation))
        logger.debug(decisions[-1])

    (out / DECISIONS_FILE).write_text("".join(line + "\n" for line in decisions), encoding="utf-8")
    write_manifest(out, cfg, fill_value=segment_config.fill_value)
    logger.info(f"segmented {len(decisions)} {cfg.split} slices into {out}")
    return out


def read_predictions(directory: Path) -> dict[int, list[np.ndarray]]:
    directory = Path(directory)
    masks_dir = directory / MASKS_DIR if (directory / MASKS_DIR).is_dir() else directory
    predictions = {}
    for path in sorted(masks_dir.glob("*.masks")):
        try:
            sample_id = int(path.stem)
        except ValueError:
            raise FormatError(f"mask file name {path.name} is not a slice id")
        predictions[sample_id] = dataset_io.read_masks(path)
    return predictions


def cmd_eval(cfg: EvalRunConfig) -> Path:
    data = dataset_io.read_dataset(cfg.data, cfg.split)
    results = evaluation.align_results(data.samples, read_predictions(cfg.pred))
    metrics, bins = evaluation.report(
        results, cfg.px_to_mm2, cfg.name, cfg.size_bins, cfg.detection_margin
    )

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_metrics_csv(metrics, out / METRICS_FILE)
    evaluation.write_size_bins_csv(bins, out / SIZE_BINS_FILE)
    write_manifest(out, cfg)
    positives = sum(sample.label == SliceLabel.NODULE for sample in data.samples)
    logger.info(f"evaluated {len(results)} slices ({positives} positive) into {out}")
    return out
