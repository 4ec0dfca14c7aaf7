import itertools

import numpy as np
import pytest
from scipy import ndimage

import segmentation
from conftest import brightness_model, disc, gaussian_bump
from errors import DegenerateMapError, DomainError, GeometryError, SelectionError
from models import Candidate, IcmConfig, IcmResult, Nam, Scope, ScopeKind, SegmentConfig, SegmentationStatus
from nam import compute_nam


def scope_of(mask: np.ndarray, kind: ScopeKind = ScopeKind.ONE_GAP_C1) -> Scope:
    peak = tuple(int(value) for value in np.argwhere(mask)[0])
    return Scope(mask=mask, kind=kind, peak=peak, peak_value=1.0)


def is_four_connected(mask: np.ndarray) -> bool:
    return ndimage.label(mask, structure=segmentation.FOUR_CONNECTED)[1] == 1


def two_bumps(shape=(32, 48)):
    return gaussian_bump(shape, (16, 12), 3.0, 5.0) + gaussian_bump(shape, (16, 36), 3.0, 3.0)


class TestScope:
    def test_single_bump(self):
        nam_map = gaussian_bump((32, 32), (14, 17), 3.0)
        scope = segmentation.extract_scope(nam_map)
        assert scope.mask[14, 17]
        assert scope.peak == (14, 17)
        assert is_four_connected(scope.mask)
        assert np.all(nam_map[scope.mask] >= 0.4 * nam_map.max())

    def test_prominent_bump_only(self):
        scope = segmentation.extract_scope(two_bumps())
        assert scope.mask[16, 12]
        assert not scope.mask[:, 24:].any()

    def test_constant_map(self):
        with pytest.raises(DegenerateMapError):
            segmentation.extract_scope(np.full((8, 8), 0.3))

    def test_accepts_nam(self):
        nam_map = gaussian_bump((16, 16), (8, 8), 2.0)
        from_nam = segmentation.extract_scope(Nam(map=nam_map, raw_maps=[], score=0.0))
        assert np.array_equal(from_nam.mask, segmentation.extract_scope(nam_map).mask)

    def test_negative_map_still_gives_scope(self):
        nam_map = gaussian_bump((16, 16), (5, 9), 2.0) - 3.0
        scope = segmentation.extract_scope(nam_map)
        assert scope.mask[5, 9]
        assert is_four_connected(scope.mask)

    def test_top_two_scopes(self):
        first, second = segmentation.extract_top_scopes(two_bumps(), 2)
        assert first.mask[16, 12] and second.mask[16, 36]
        assert not np.any(first.mask & second.mask)

    def test_top_scopes_of_single_bump(self):
        assert len(segmentation.extract_top_scopes(gaussian_bump((16, 16), (8, 8), 2.0), 2)) == 1

    def test_top_one_equals_extract_scope(self, rng):
        nam_map = rng.normal(size=(12, 12))
        assert np.array_equal(
            segmentation.extract_top_scopes(nam_map, 1)[0].mask, segmentation.extract_scope(nam_map).mask
        )

    def test_top_scopes_needs_positive_count(self):
        with pytest.raises(DomainError):
            segmentation.extract_top_scopes(two_bumps(), 0)

    def test_random_maps_keep_argmax(self, rng):
        for _ in range(30):
            nam_map = ndimage.gaussian_filter(rng.normal(size=(20, 20)), 1.5)
            scope = segmentation.extract_scope(nam_map)
            assert scope.mask[np.unravel_index(np.argmax(nam_map), nam_map.shape)]
            assert is_four_connected(scope.mask)


class TestRefineScope:
    def test_multi_blob_inside_c1_is_clipped(self):
        c1 = segmentation.extract_scope(gaussian_bump((32, 32), (16, 16), 6.0))
        multi = gaussian_bump((32, 32), (14, 15), 1.5)
        refined = segmentation.refine_scope(c1, multi)
        assert refined.kind == ScopeKind.MULTI_GAP_CMULTI
        assert refined.mask[14, 15]
        assert not np.any(refined.mask & ~c1.mask)
        assert refined.area < c1.area

    def test_multi_blob_outside_c1_keeps_c1(self):
        c1 = segmentation.extract_scope(gaussian_bump((32, 32), (8, 8), 2.0))
        refined = segmentation.refine_scope(c1, gaussian_bump((32, 32), (24, 24), 2.0))
        assert refined is c1

    def test_flat_multi_map_keeps_c1(self):
        c1 = segmentation.extract_scope(gaussian_bump((16, 16), (8, 8), 2.0))
        assert segmentation.refine_scope(c1, np.zeros((16, 16))) is c1


def brute_force_energy(values, means, beta):
    best = np.inf
    for assignment in itertools.product(range(len(means)), repeat=values.size):
        labels = np.array(assignment).reshape(values.shape)
        best = min(best, segmentation.icm_energy(values, labels, means, beta))
    return best


class TestIcm:
    def test_energy_never_increases(self, rng):
        for trial in range(1000):
            size = rng.integers(3, 12, size=2)
            image = rng.uniform(size=(1, *size))
            if trial % 2:
                image[0, : size[0] // 2] += 0.5
            scope = scope_of(np.ones(tuple(size), dtype=bool))
            cfg = IcmConfig(phases=int(rng.integers(2, 5)), beta=float(rng.uniform(0, 0.3)), window_margin=0)
            energies = segmentation.icm_segment(image, scope, cfg).energies
            assert all(later <= earlier + 1e-9 for earlier, later in zip(energies, energies[1:]))

    def test_zero_beta_is_nearest_initial_mean(self, rng):
        for _ in range(20):
            values = rng.uniform(size=(7, 9))
            result = segmentation.icm_segment(values[None], scope_of(np.ones((7, 9), dtype=bool)),
                                              IcmConfig(phases=4, beta=0.0, window_margin=0))
            oracle = segmentation.nearest_mean_labels(values, segmentation.initial_means(values, 4))
            assert np.array_equal(result.labels, oracle)

    def test_initial_means_are_quantiles(self):
        values = np.arange(81, dtype=np.float64).reshape(9, 9)
        np.testing.assert_allclose(segmentation.initial_means(values, 4), np.quantile(values, [1 / 8, 3 / 8, 5 / 8, 7 / 8]))

    def test_two_intensity_window_is_split_exactly(self):
        values = np.full((3, 3), 10.0)
        values[:2, :2] = 200.0
        result = segmentation.icm_segment(values[None], scope_of(np.ones((3, 3), dtype=bool)),
                                          IcmConfig(phases=2, beta=1.0, window_margin=0))
        assert np.array_equal(result.labels == result.brightest_phase, values == 200.0)
        assert result.energies[-1] == pytest.approx(
            brute_force_energy(values, result.means, result.beta)
        )

    def test_final_energy_bounded_by_brute_force(self, rng):
        for _ in range(30):
            values = rng.uniform(size=(3, 3))
            result = segmentation.icm_segment(values[None], scope_of(np.ones((3, 3), dtype=bool)),
                                              IcmConfig(phases=2, beta=0.05, window_margin=0))
            optimum = brute_force_energy(values, result.means, result.beta)
            assert result.energies[-1] >= optimum - 1e-12

    def test_two_intensity_patterns_reach_brute_force_energy(self, rng):
        exact = 0
        for _ in range(300):
            low, high = np.sort(rng.uniform(size=2))
            pattern = rng.random((3, 3)) < 0.5
            pattern[0, 0], pattern[2, 2] = True, False
            values = np.where(pattern, high, low)
            result = segmentation.icm_segment(values[None], scope_of(np.ones((3, 3), dtype=bool)),
                                              IcmConfig(phases=2, window_margin=0))
            optimum = brute_force_energy(values, result.means, result.beta)
            exact += abs(result.energies[-1] - optimum) <= 1e-9
        assert exact >= 240

    def test_window_is_clipped_bbox_plus_margin(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:5, 10:13] = True
        assert segmentation.icm_window(scope_of(mask), 3, (20, 20)) == (0, 8, 7, 16)

    def test_window_smaller_than_two_by_two(self):
        with pytest.raises(GeometryError):
            segmentation.icm_segment(np.ones((1, 1, 5)), scope_of(np.ones((1, 5), dtype=bool)), IcmConfig())

    def test_auto_beta_is_capped(self):
        values = np.zeros((6, 6))
        values[:3] = 10.0
        result = segmentation.icm_segment(values[None], scope_of(np.ones((6, 6), dtype=bool)),
                                          IcmConfig(window_margin=0))
        assert result.beta == 1.0


def icm_from(labels: np.ndarray, means, window=None) -> IcmResult:
    window = window or (0, labels.shape[0], 0, labels.shape[1])
    return IcmResult(labels=labels, window=window, means=np.asarray(means, dtype=np.float64), beta=0.0, energies=[0.0])


class TestCandidates:
    def test_blob_inside_scope(self):
        labels = np.zeros((10, 10), dtype=np.int64)
        labels[3:6, 3:6] = 1
        scope = np.zeros((10, 10), dtype=bool)
        scope[2:7, 2:7] = True
        candidates = segmentation.extract_candidates(icm_from(labels, [0.1, 0.9]), scope_of(scope))
        assert len(candidates) == 1
        assert np.array_equal(candidates[0].mask, labels == 1)
        assert candidates[0].area == 9
        assert candidates[0].bbox == (3, 3, 5, 5)

    def test_blob_outside_scope(self):
        labels = np.zeros((10, 10), dtype=np.int64)
        labels[0:3, 0:3] = 1
        scope = np.zeros((10, 10), dtype=bool)
        scope[6:9, 6:9] = True
        assert segmentation.extract_candidates(icm_from(labels, [0.1, 0.9]), scope_of(scope)) == []

    def test_two_blobs_larger_first(self):
        labels = np.zeros((12, 12), dtype=np.int64)
        labels[1:3, 1:4] = 2
        labels[6:10, 6:10] = 2
        scope = np.zeros((12, 12), dtype=bool)
        scope[2:8, 2:8] = True
        candidates = segmentation.extract_candidates(icm_from(labels, [0.1, 0.2, 0.9]), scope_of(scope))
        assert [candidate.area for candidate in candidates] == [16, 6]

    def test_speckle_is_dropped(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[2, 2] = 1
        labels[4:7, 4:7] = 1
        candidates = segmentation.extract_candidates(
            icm_from(labels, [0.1, 0.9]), scope_of(np.ones((8, 8), dtype=bool)), min_area=4
        )
        assert [candidate.area for candidate in candidates] == [9]

    def test_window_offset_is_applied(self):
        labels = np.zeros((4, 4), dtype=np.int64)
        labels[1:3, 1:3] = 1
        scope = np.zeros((10, 10), dtype=bool)
        scope[5:8, 5:8] = True
        candidates = segmentation.extract_candidates(icm_from(labels, [0.0, 1.0], window=(4, 8, 4, 8)), scope_of(scope))
        assert candidates[0].bbox == (5, 5, 6, 6)


class TestSelection:
    def test_single_candidate(self, bright_model):
        image = np.full((1, 32, 32), 0.2)
        mask = disc((32, 32), (10, 10), 3)
        nam = compute_nam(bright_model, image)
        selection = segmentation.select_candidate(
            bright_model, image, nam, scope_of(np.ones((32, 32), dtype=bool)), [Candidate.from_mask(mask)], 0.2
        )
        assert selection.index == 0

    def test_empty_candidate_list(self, bright_model):
        image = np.full((1, 32, 32), 0.2)
        with pytest.raises(SelectionError):
            segmentation.select_candidate(
                bright_model, image, compute_nam(bright_model, image), scope_of(np.ones((32, 32), dtype=bool)), [], 0.2
            )

    def test_bright_candidate_inside_scope_wins(self, bright_model):
        nodule, decoy = disc((32, 32), (10, 10), 4), disc((32, 32), (22, 22), 3)
        image = (0.2 + 0.6 * nodule + 0.6 * decoy)[None]
        scope = np.zeros((32, 32), dtype=bool)
        scope[3:18, 3:18] = True
        candidates = [Candidate.from_mask(decoy), Candidate.from_mask(nodule)]
        selection = segmentation.select_candidate(
            bright_model, image, compute_nam(bright_model, image), scope_of(scope), candidates, 0.2
        )
        assert selection.index == 1
        assert all(score >= 0 for score in selection.scores)

    def test_tie_goes_to_larger_area(self, bright_model):
        bright_model.fc_weight.data[1] = 0.0
        image = np.full((1, 32, 32), 0.2)
        small, large = disc((32, 32), (8, 8), 2), disc((32, 32), (20, 20), 4)
        candidates = [Candidate.from_mask(small), Candidate.from_mask(large)]
        selection = segmentation.select_candidate(
            bright_model, image, compute_nam(bright_model, image), scope_of(np.ones((32, 32), dtype=bool)),
            candidates, 0.2
        )
        assert selection.scores == [0.0, 0.0]
        assert selection.index == 1

    def test_order_does_not_change_choice(self, bright_model):
        nodule, decoy = disc((32, 32), (10, 10), 4), disc((32, 32), (22, 22), 3)
        image = (0.2 + 0.5 * nodule + 0.7 * decoy)[None]
        nam = compute_nam(bright_model, image)
        scope = scope_of(np.ones((32, 32), dtype=bool))
        forward = segmentation.select_candidate(
            bright_model, image, nam, scope, [Candidate.from_mask(nodule), Candidate.from_mask(decoy)], 0.2
        )
        backward = segmentation.select_candidate(
            bright_model, image, nam, scope, [Candidate.from_mask(decoy), Candidate.from_mask(nodule)], 0.2
        )
        assert np.array_equal(forward.candidate.mask, backward.candidate.mask)


class TestSegmentSlice:
    def nodule_image(self, rng, centers=((12, 18),), radius=4):
        image = np.full((32, 32), 0.2) + rng.normal(0, 0.01, size=(32, 32))
        truth = [disc((32, 32), center, radius) for center in centers]
        for mask in truth:
            image[mask] += 0.6
        return image[None], truth

    def test_negative_slice_is_not_segmented(self, rng):
        image, _ = self.nodule_image(rng)
        result = segmentation.segment_slice(brightness_model(nodule=False), image)
        assert result.status == SegmentationStatus.NO_NODULE
        assert result.masks == []
        assert result.nam is None

    def test_bright_disc_is_segmented(self, bright_model, rng):
        image, (truth,) = self.nodule_image(rng)
        result = segmentation.segment_slice(bright_model, image, SegmentConfig(fill_value=0.2))
        assert result.status == SegmentationStatus.NODULE
        assert len(result.masks) == 1
        overlap = np.logical_and(result.masks[0], truth).sum()
        assert 2 * overlap / (result.masks[0].sum() + truth.sum()) >= 0.5
        assert result.scope_kinds == [ScopeKind.ONE_GAP_C1]

    def test_coarse_only_marks_no_selection(self, bright_model, rng):
        image, _ = self.nodule_image(rng)
        result = segmentation.segment_slice(bright_model, image, SegmentConfig(fill_value=0.2, coarse_only=True))
        assert result.selected_indices == [-1]

    def test_same_multi_model_keeps_pipeline(self, bright_model, rng):
        image, _ = self.nodule_image(rng)
        alone = segmentation.segment_slice(bright_model, image, SegmentConfig(fill_value=0.2))
        paired = segmentation.segment_slice(bright_model, image, SegmentConfig(fill_value=0.2), brightness_model())
        assert paired.scope_kinds == [ScopeKind.MULTI_GAP_CMULTI]
        assert np.array_equal(paired.masks[0], alone.masks[0])

    def test_two_nodule_mode(self, bright_model):
        centers = ((9, 9), (22, 23))
        image = 0.2 + gaussian_bump((32, 32), centers[0], 2.5, 0.6) + gaussian_bump((32, 32), centers[1], 2.5, 0.5)
        truth = [disc((32, 32), center, 2) for center in centers]
        result = segmentation.segment_slice(bright_model, image[None], SegmentConfig(fill_value=0.2, two_nodule=True))
        assert len(result.masks) == 2
        for mask in truth:
            assert any(np.any(pred & mask) for pred in result.masks)
        assert not np.any(result.masks[0] & result.masks[1])

    def test_flat_image_fails_detection(self, bright_model):
        result = segmentation.segment_slice(bright_model, np.full((1, 32, 32), 0.2))
        assert result.status == SegmentationStatus.DETECTION_FAILED
        assert result.masks == []
        assert result.detail
