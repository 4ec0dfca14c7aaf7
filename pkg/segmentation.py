import logging
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from skimage.morphology import local_maxima
from skimage.segmentation import watershed

import validation
from errors import DegenerateMapError, DomainError, GeometryError, NamSegError, SelectionError
from models import (Candidate, IcmConfig, IcmResult, Nam, Scope, ScopeKind, SegmentConfig, SegmentationStatus,
                    Selection, SliceLabel, SliceSegmentation)
from nam import compute_nam, compute_rnam, nam_distance
from network import Model, classify

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
DEFAULT_SCOPE_THRESHOLD = 0.4
DEFAULT_MIN_AREA = 4
FLAT_TOLERANCE = 1e-9


class Basin(NamedTuple):
    label: int
    peak: tuple[int, int]
    peak_value: float


def _as_map(nam: Union[Nam, np.ndarray]) -> np.ndarray:
    nam_map = nam.map if isinstance(nam, Nam) else np.asarray(nam, dtype=np.float64)
    validation.validate_ndim("NAM", nam_map, (2,))
    validation.validate_finite("NAM", nam_map)
    # interpolation leaves round-off ripples on flat maps
    if np.ptp(nam_map) <= FLAT_TOLERANCE * np.abs(nam_map).max():
        raise DegenerateMapError("NAM is constant, it has no distinct maximum")
    return nam_map


def watershed_basins(nam_map: np.ndarray) -> np.ndarray:
    markers, _ = ndimage.label(local_maxima(nam_map, connectivity=1), structure=FOUR_CONNECTED)
    return watershed(-nam_map, markers=markers, connectivity=1)


def ranked_basins(nam_map: np.ndarray, basins: np.ndarray) -> list[Basin]:
    ranked = []
    for label in np.unique(basins[basins > 0]):
        flat_index = int(np.argmax(np.where(basins == label, nam_map, -np.inf)))
        peak = np.unravel_index(flat_index, nam_map.shape)
        ranked.append((-nam_map[peak], flat_index, Basin(int(label), (int(peak[0]), int(peak[1])), float(nam_map[peak]))))
    ranked.sort(key=lambda item: item[:2])
    return [basin for *_, basin in ranked]


def _scope_level(basin_values: np.ndarray, peak_value: float, threshold: float) -> float:
    if peak_value > 0:
        return threshold * peak_value
    floor = float(basin_values.min())
    return floor + threshold * (peak_value - floor)


def _connected_to(mask: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    components, _ = ndimage.label(mask, structure=FOUR_CONNECTED)
    return components == components[pixel]


def _basin_scope(nam_map: np.ndarray, basins: np.ndarray, basin: Basin, threshold: float, kind: ScopeKind) -> Scope:
    region = basins == basin.label
    level = _scope_level(nam_map[region], basin.peak_value, threshold)
    mask = _connected_to(region & (nam_map >= level), basin.peak)
    return Scope(mask=mask, kind=kind, peak=basin.peak, peak_value=basin.peak_value)


def extract_scope(
        nam: Union[Nam, np.ndarray],
        threshold: float = DEFAULT_SCOPE_THRESHOLD,
        kind: ScopeKind = ScopeKind.ONE_GAP_C1
) -> Scope:
    return extract_top_scopes(nam, 1, threshold, kind)[0]


def extract_top_scopes(
        nam: Union[Nam, np.ndarray],
        n: int,
        threshold: float = DEFAULT_SCOPE_THRESHOLD,
        kind: ScopeKind = ScopeKind.ONE_GAP_C1
) -> list[Scope]:
    if n < 1:
        raise DomainError(f"number of scopes {n} should be at least 1")
    nam_map = _as_map(nam)
    basins = watershed_basins(nam_map)
    return [_basin_scope(nam_map, basins, basin, threshold, kind) for basin in ranked_basins(nam_map, basins)[:n]]


def refine_scope(scope_c1: Scope, nam_multi: Union[Nam, np.ndarray], threshold: float = DEFAULT_SCOPE_THRESHOLD) -> Scope:
    try:
        nam_map = _as_map(nam_multi)
    except DegenerateMapError:
        return scope_c1
    basins = watershed_basins(nam_map)
    ranked = ranked_basins(nam_map, basins)
    prominence = _scope_level(nam_map, ranked[0].peak_value, threshold)
    for basin in ranked:
        if basin.peak_value < prominence:
            break
        if not scope_c1.mask[basin.peak]:
            continue
        scope_multi = _basin_scope(nam_map, basins, basin, threshold, ScopeKind.MULTI_GAP_CMULTI)
        clipped = _connected_to(scope_multi.mask & scope_c1.mask, basin.peak)
        return Scope(mask=clipped, kind=ScopeKind.MULTI_GAP_CMULTI, peak=basin.peak, peak_value=basin.peak_value)
    return scope_c1


def icm_window(scope: Scope, margin: int, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    x_min, y_min, x_max, y_max = scope.bbox
    return (
        max(y_min - margin, 0),
        min(y_max + margin + 1, shape[0]),
        max(x_min - margin, 0),
        min(x_max + margin + 1, shape[1]),
    )


def icm_energy(values: np.ndarray, labels: np.ndarray, means: np.ndarray, beta: float) -> float:
    unary = np.sum((values - means[labels]) ** 2)
    disagreements = np.count_nonzero(labels[1:, :] != labels[:-1, :]) + np.count_nonzero(labels[:, 1:] != labels[:, :-1])
    return float(unary + beta * disagreements)


def nearest_mean_labels(values: np.ndarray, means: np.ndarray) -> np.ndarray:
    return np.argmin((values[..., None] - means) ** 2, axis=-1)


def initial_means(values: np.ndarray, phases: int) -> np.ndarray:
    return np.quantile(values, (2 * np.arange(phases) + 1) / (2 * phases))


def _icm_sweep(values: np.ndarray, labels: np.ndarray, means: np.ndarray, beta: float) -> int:
    rows, cols = labels.shape
    phases = range(len(means))
    unary = ((values[..., None] - means) ** 2).tolist()
    grid = labels.tolist()
    changed = 0
    for r in range(rows):
        for c in range(cols):
            neighbours = []
            if r > 0:
                neighbours.append(grid[r - 1][c])
            if r < rows - 1:
                neighbours.append(grid[r + 1][c])
            if c > 0:
                neighbours.append(grid[r][c - 1])
            if c < cols - 1:
                neighbours.append(grid[r][c + 1])
            costs = unary[r][c]
            current = best = grid[r][c]
            best_cost = costs[current] + beta * sum(n != current for n in neighbours)
            for phase in phases:
                cost = costs[phase] + beta * sum(n != phase for n in neighbours)
                if cost < best_cost:
                    best, best_cost = phase, cost
            if best != current:
                grid[r][c] = best
                changed += 1
    labels[:] = grid
    return changed


def _phase_means(values: np.ndarray, labels: np.ndarray, means: np.ndarray) -> np.ndarray:
    updated = means.copy()
    for phase in range(len(means)):
        members = values[labels == phase]
        if members.size:
            updated[phase] = members.mean()
    return updated


def icm_segment(image: np.ndarray, scope: Scope, cfg: IcmConfig) -> IcmResult:
    pixels = np.asarray(image, dtype=np.float64)
    pixels = pixels[0] if pixels.ndim == 3 else pixels
    validation.validate_shape_match("scope", pixels.shape, scope.mask.shape)
    window = icm_window(scope, cfg.window_margin, pixels.shape)
    row_start, row_stop, col_start, col_stop = window
    if row_stop - row_start < 2 or col_stop - col_start < 2:
        raise GeometryError(f"ICM window {window} is smaller than 2x2")
    values = pixels[row_start:row_stop, col_start:col_stop]

    means = initial_means(values, cfg.phases)
    beta = cfg.beta if cfg.beta is not None else min(cfg.beta_scale * float(np.ptp(values)) ** 2, cfg.beta_cap)
    labels = nearest_mean_labels(values, means)
    energies = [icm_energy(values, labels, means, beta)]
    for _ in range(cfg.max_iters):
        if not _icm_sweep(values, labels, means, beta):
            break
        means = _phase_means(values, labels, means)
        energies.append(icm_energy(values, labels, means, beta))
    return IcmResult(labels=labels, window=window, means=means, beta=beta, energies=energies)


def extract_candidates(icm: IcmResult, scope: Scope, min_area: int = DEFAULT_MIN_AREA) -> list[Candidate]:
    row_start, row_stop, col_start, col_stop = icm.window
    components, count = ndimage.label(icm.labels == icm.brightest_phase, structure=FOUR_CONNECTED)
    scope_window = scope.mask[row_start:row_stop, col_start:col_stop]
    candidates = []
    for index in range(1, count + 1):
        component = components == index
        if component.sum() < min_area or not np.any(component & scope_window):
            continue
        mask = np.zeros(scope.mask.shape, dtype=bool)
        mask[row_start:row_stop, col_start:col_stop] = component
        candidates.append(Candidate.from_mask(mask))
    candidates.sort(key=lambda candidate: (-candidate.area, candidate.bbox[0], candidate.bbox[1]))
    return candidates


def select_candidate(
        model: Model,
        image: np.ndarray,
        nam_i: Nam,
        scope_c1: Scope,
        candidates: Sequence[Candidate],
        fill_value: float
) -> Selection:
    validation.validate_not_empty(candidates, "candidate list", SelectionError)
    scores = [
        nam_distance(nam_i, compute_rnam(model, image, candidate.mask, fill_value), scope_c1)
        for candidate in candidates
    ]
    # ties: larger area, then smaller bbox xmin, then ymin
    index = max(
        range(len(candidates)),
        key=lambda j: (scores[j], candidates[j].area, -candidates[j].bbox[0], -candidates[j].bbox[1]),
    )
    return Selection(candidate=candidates[index], index=index, scores=scores)


class _ScopeOutcome(NamedTuple):
    mask: np.ndarray
    kind: ScopeKind
    candidate_count: int
    selected_index: int
    icm: IcmResult


def _segment_scope(
        one_gap_model: Model,
        image: np.ndarray,
        nam_one: Nam,
        scope_c1: Scope,
        nam_multi: Optional[Nam],
        config: SegmentConfig
) -> _ScopeOutcome:
    scope = refine_scope(scope_c1, nam_multi, config.scope_threshold) if nam_multi is not None else scope_c1
    icm = icm_segment(image, scope, config.icm)
    candidates = extract_candidates(icm, scope, config.min_area)
    validation.validate_not_empty(candidates, "candidate list", SelectionError)
    if config.coarse_only:
        mask = np.logical_or.reduce([candidate.mask for candidate in candidates])
        return _ScopeOutcome(mask, scope.kind, len(candidates), -1, icm)
    selection = select_candidate(one_gap_model, image, nam_one, scope_c1, candidates, config.fill_value)
    return _ScopeOutcome(selection.candidate.mask, scope.kind, len(candidates), selection.index, icm)


def segment_slice(
        one_gap_model: Model,
        image: np.ndarray,
        config: SegmentConfig = SegmentConfig(),
        multi_gap_model: Optional[Model] = None
) -> SliceSegmentation:
    classification = classify(one_gap_model, image)
    if classification.label == SliceLabel.NO_NODULE:
        return SliceSegmentation(status=SegmentationStatus.NO_NODULE, probability=classification.probability)

    result = SliceSegmentation(status=SegmentationStatus.NODULE, probability=classification.probability)
    try:
        result.nam = compute_nam(one_gap_model, image)
        scopes_c1 = extract_top_scopes(result.nam, 2 if config.two_nodule else 1, config.scope_threshold)
        nam_multi = compute_nam(multi_gap_model, image) if multi_gap_model is not None else None
    except NamSegError as error:
        return _failed(result, error)

    for position, scope_c1 in enumerate(scopes_c1):
        try:
            outcome = _segment_scope(one_gap_model, image, result.nam, scope_c1, nam_multi, config)
        except (DegenerateMapError, SelectionError, GeometryError) as error:
            if position == 0:
                return _failed(result, error)
            logger.debug(f"second scope dropped: {error.detail}")
            continue
        if any(np.any(outcome.mask & kept) for kept in result.masks):
            continue
        result.masks.append(outcome.mask)
        result.scope_kinds.append(outcome.kind)
        result.candidate_counts.append(outcome.candidate_count)
        result.selected_indices.append(outcome.selected_index)
        result.icm_results.append(outcome.icm)
    return result


def _failed(result: SliceSegmentation, error: NamSegError) -> SliceSegmentation:
    logger.debug(f"detection failed: {error.detail}")
    result.status = SegmentationStatus.DETECTION_FAILED
    result.detail = error.detail
    result.masks = []
    return result
