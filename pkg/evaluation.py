import csv
import logging
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

import validation
from errors import DataError
from models import MetricsReport, Sample, SizeBin, SliceLabel, SliceResult, mask_bbox
from utils import round_float

logger = logging.getLogger(__name__)

DETECTION_MARGIN = 2
SIZE_BIN_EDGES = (6.0, 9.0, 12.0, 15.0)

METRICS_COLUMNS = (
    "name", "n_slices", "n_positive", "n_negative", "tpr", "fpr", "fpr_nodule",
    "dice_mean", "dice_sd", "tp_dice_mean", "tp_dice_sd", "tp_doa_mean", "tp_doa_sd",
    "n_detected", "n_true_positive_nodules", "n_two_nodule", "both_detected", "one_detected",
)
SIZE_BIN_COLUMNS = ("lower", "upper", "n_nodules", "tp_dice_mean", "tp_dice_sd", "tp_doa_mean", "tp_doa_sd")


class Match(NamedTuple):
    truth_index: int
    pred_index: int
    dice: float
    doa: float


class SliceOutcome(NamedTuple):
    slice_id: int
    label: SliceLabel
    n_predictions: int
    matches: list[Match]
    unmatched_predictions: int
    slice_dice: float

    @property
    def detected(self) -> bool:
        return bool(self.matches)


class DetectionOutcomes(NamedTuple):
    slices: list[SliceOutcome]
    tpr: float
    fpr: float
    fpr_nodule: float
    n_positive: int
    n_negative: int
    n_two_nodule: int
    both_detected: int
    one_detected: int


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    mask_a, mask_b = np.asarray(mask_a, dtype=bool), np.asarray(mask_b, dtype=bool)
    validation.validate_shape_match("mask", mask_a.shape, mask_b.shape)
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(mask_a, mask_b).sum()) / total


def is_true_detection(pred: np.ndarray, truth: np.ndarray, margin: int = DETECTION_MARGIN) -> bool:
    if not pred.any() or dice(pred, truth) <= 0:
        return False
    rows, cols = np.nonzero(pred)
    xmin, ymin, xmax, ymax = mask_bbox(truth)
    return xmin - margin <= cols.mean() <= xmax + margin and ymin - margin <= rows.mean() <= ymax + margin


def _union(masks: Sequence[np.ndarray], shape: tuple[int, ...]) -> np.ndarray:
    union = np.zeros(shape, dtype=bool)
    for mask in masks:
        union |= mask
    return union


def _match(result: SliceResult, px_to_mm2: float, margin: int) -> SliceOutcome:
    # each truth nodule takes the best unused true detection, in truth order
    used: set[int] = set()
    matches = []
    for truth_index, truth in enumerate(result.truth_masks):
        best = None
        for pred_index, pred in enumerate(result.pred_masks):
            if pred_index in used or not is_true_detection(pred, truth, margin):
                continue
            score = dice(pred, truth)
            if best is None or score > best.dice:
                doa = abs(int(pred.sum()) - int(truth.sum())) * px_to_mm2
                best = Match(truth_index, pred_index, score, doa)
        if best is not None:
            used.add(best.pred_index)
            matches.append(best)

    slice_dice = 0.0
    if result.truth_masks:
        shape = result.truth_masks[0].shape
        slice_dice = dice(_union(result.pred_masks, shape), _union(result.truth_masks, shape))
    return SliceOutcome(
        slice_id=result.slice_id,
        label=result.label,
        n_predictions=len(result.pred_masks),
        matches=matches,
        unmatched_predictions=len(result.pred_masks) - len(used),
        slice_dice=slice_dice,
    )


def _ratio(count: int, total: int) -> float:
    return count / total if total else 0.0


def detection_outcomes(
        results: Sequence[SliceResult],
        px_to_mm2: float = 1.0,
        margin: int = DETECTION_MARGIN
) -> DetectionOutcomes:
    ids = [result.slice_id for result in results]
    if len(set(ids)) != len(ids):
        raise DataError("slice ids should be unique")
    outcomes = [_match(result, px_to_mm2, margin) for result in results]

    positives = [outcome for outcome in outcomes if outcome.label == SliceLabel.NODULE]
    negatives = [outcome for outcome in outcomes if outcome.label == SliceLabel.NO_NODULE]
    two_nodule = [
        (outcome, result) for outcome, result in zip(outcomes, results) if len(result.truth_masks) >= 2
    ]
    return DetectionOutcomes(
        slices=outcomes,
        tpr=_ratio(sum(outcome.detected for outcome in positives), len(positives)),
        fpr=_ratio(sum(outcome.n_predictions > 0 for outcome in negatives), len(negatives)),
        fpr_nodule=_ratio(sum(outcome.unmatched_predictions > 0 for outcome in positives), len(positives)),
        n_positive=len(positives),
        n_negative=len(negatives),
        n_two_nodule=len(two_nodule),
        both_detected=sum(len(outcome.matches) == len(result.truth_masks) for outcome, result in two_nodule),
        one_detected=sum(len(outcome.matches) == 1 for outcome, result in two_nodule),
    )


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    array = np.asarray(values, dtype=np.float64)
    sd = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return float(array.mean()), sd


def equivalent_diameter(area: int, px_to_mm2: float = 1.0) -> float:
    return float(np.sqrt(4.0 * area / np.pi) * np.sqrt(px_to_mm2))


def size_bins(
        results: Sequence[SliceResult],
        outcomes: DetectionOutcomes,
        px_to_mm2: float = 1.0,
        edges: Sequence[float] = SIZE_BIN_EDGES
) -> list[SizeBin]:
    bounds = [0.0, *edges, float("inf")]
    diameters: list[list[float]] = [[] for _ in bounds[1:]]
    dices: list[list[float]] = [[] for _ in bounds[1:]]
    doas: list[list[float]] = [[] for _ in bounds[1:]]
    for result, outcome in zip(results, outcomes.slices):
        matched = {match.truth_index: match for match in outcome.matches}
        for truth_index, truth in enumerate(result.truth_masks):
            diameter = equivalent_diameter(int(truth.sum()), px_to_mm2)
            index = int(np.searchsorted(bounds, diameter, side="right")) - 1
            index = min(max(index, 0), len(diameters) - 1)
            diameters[index].append(diameter)
            if truth_index in matched:
                dices[index].append(matched[truth_index].dice)
                doas[index].append(matched[truth_index].doa)

    bins = []
    for index, (lower, upper) in enumerate(zip(bounds, bounds[1:])):
        dice_mean, dice_sd = mean_sd(dices[index])
        doa_mean, doa_sd = mean_sd(doas[index])
        bins.append(SizeBin(
            lower=lower, upper=upper, n_nodules=len(diameters[index]),
            tp_dice_mean=dice_mean, tp_dice_sd=dice_sd, tp_doa_mean=doa_mean, tp_doa_sd=doa_sd,
        ))
    return bins


def report(
        results: Sequence[SliceResult],
        px_to_mm2: float = 1.0,
        name: str = "",
        edges: Sequence[float] = SIZE_BIN_EDGES,
        margin: int = DETECTION_MARGIN
) -> tuple[MetricsReport, list[SizeBin]]:
    validation.validate_not_empty(results, "results")
    outcomes = detection_outcomes(results, px_to_mm2, margin)
    positives = [outcome for outcome in outcomes.slices if outcome.label == SliceLabel.NODULE]
    matches = [match for outcome in outcomes.slices for match in outcome.matches]

    dice_mean, dice_sd = mean_sd([outcome.slice_dice for outcome in positives])
    tp_dice_mean, tp_dice_sd = mean_sd([match.dice for match in matches])
    tp_doa_mean, tp_doa_sd = mean_sd([match.doa for match in matches])
    metrics = MetricsReport(
        name=name,
        tpr=outcomes.tpr,
        fpr=outcomes.fpr,
        fpr_nodule=outcomes.fpr_nodule,
        dice_mean=dice_mean,
        dice_sd=dice_sd,
        tp_dice_mean=tp_dice_mean,
        tp_dice_sd=tp_dice_sd,
        tp_doa_mean=tp_doa_mean,
        tp_doa_sd=tp_doa_sd,
        n_slices=len(results),
        n_positive=outcomes.n_positive,
        n_negative=outcomes.n_negative,
        n_detected=sum(outcome.detected for outcome in positives),
        n_true_positive_nodules=len(matches),
        n_two_nodule=outcomes.n_two_nodule,
        both_detected=outcomes.both_detected,
        one_detected=outcomes.one_detected,
    )
    logger.info(
        f"{name or 'report'}: TPR {metrics.tpr:.3f} FPR {metrics.fpr:.3f} FPR_nodule {metrics.fpr_nodule:.3f} "
        f"TP Dice {metrics.tp_dice_mean:.3f} over {metrics.n_slices} slices"
    )
    return metrics, size_bins(results, outcomes, px_to_mm2, edges)


def align_results(samples: Sequence[Sample], predictions: Mapping[int, list[np.ndarray]]) -> list[SliceResult]:
    validation.validate_ids_known(list(predictions), [sample.sample_id for sample in samples], "prediction")
    return [
        SliceResult(
            slice_id=sample.sample_id,
            label=sample.label,
            truth_masks=sample.truth_masks,
            pred_masks=predictions.get(sample.sample_id, []),
        )
        for sample in samples
    ]


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(round_float(value))
    return str(value)


def write_metrics_csv(metrics: MetricsReport, path: Path):
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        values = metrics.dict()
        writer.writerow(_cell(values[column]) for column in METRICS_COLUMNS)


def write_size_bins_csv(bins: Sequence[SizeBin], path: Path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SIZE_BIN_COLUMNS)
        for size_bin in bins:
            values = size_bin.dict()
            writer.writerow(_cell(values[column]) for column in SIZE_BIN_COLUMNS)
