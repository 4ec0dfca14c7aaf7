import numpy as np
import pytest

import dataset
from errors import ConfigError, DataError
from models import SliceLabel, SyntheticConfig


@pytest.fixture
def small_config():
    return SyntheticConfig(image_size=32, nodule_radius_range=(2.0, 5.0), decoy_rate=0.5, seed=5)


class TestGenerate:
    def test_counts_and_labels(self, small_config):
        samples = dataset.generate(small_config, 6, 4)
        assert [sample.sample_id for sample in samples] == list(range(10))
        assert [sample.label for sample in samples] == [SliceLabel.NODULE] * 6 + [SliceLabel.NO_NODULE] * 4

    def test_images_are_unit_range_single_channel(self, small_config):
        for sample in dataset.generate(small_config, 3, 3):
            assert sample.image.shape == (1, 32, 32)
            assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_truth_masks_only_on_positives(self, small_config):
        for sample in dataset.generate(small_config, 5, 5):
            if sample.label == SliceLabel.NODULE:
                assert sample.truth_masks
                assert all(mask.shape == (32, 32) and mask.any() for mask in sample.truth_masks)
            else:
                assert sample.truth_masks == []

    def test_nodules_are_brighter_than_background(self, small_config):
        for sample in dataset.generate(small_config.copy(update={"noise_sigma": 0.0}), 5, 0):
            inside = sample.image[0][sample.truth_masks[0]].mean()
            assert inside > small_config.background_level + 0.1

    def test_default_contrast_holds_over_many_slices(self):
        cfg = SyntheticConfig(seed=3)
        floor = cfg.nodule_contrast_range[0] - 2 * cfg.noise_sigma
        bright = 0
        for sample in dataset.generate(cfg, 1000, 0):
            bright += sample.image[0][sample.truth_masks[0]].mean() - cfg.background_level >= floor
        assert bright >= 950

    def test_no_positives(self, small_config):
        samples = dataset.generate(small_config, 0, 3)
        assert all(sample.label == SliceLabel.NO_NODULE for sample in samples)

    def test_same_seed_same_samples(self, small_config):
        first, second = dataset.generate(small_config, 3, 3), dataset.generate(small_config, 3, 3)
        for a, b in zip(first, second):
            assert np.array_equal(a.image, b.image)
            assert all(np.array_equal(x, y) for x, y in zip(a.truth_masks, b.truth_masks))

    def test_different_seed_different_samples(self, small_config):
        first = dataset.generate(small_config, 2, 0)
        second = dataset.generate(small_config.copy(update={"seed": 6}), 2, 0)
        assert not np.array_equal(first[0].image, second[0].image)

    def test_two_nodule_slices_have_disjoint_masks(self, small_config):
        samples = dataset.generate(small_config.copy(update={"two_nodule_rate": 1.0}), 6, 0)
        assert any(len(sample.truth_masks) == 2 for sample in samples)
        for sample in samples:
            if len(sample.truth_masks) == 2:
                assert not np.any(sample.truth_masks[0] & sample.truth_masks[1])

    def test_negative_counts(self, small_config):
        with pytest.raises(ConfigError):
            dataset.generate(small_config, -1, 3)


class TestSyntheticConfig:
    def test_radius_too_large_for_image(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(image_size=16, nodule_radius_range=(3.0, 9.0))

    def test_radius_below_two(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(nodule_radius_range=(1.0, 4.0))

    def test_contrast_must_be_positive(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(nodule_contrast_range=(0.0, 0.5))

    def test_rate_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(decoy_rate=1.5)


class TestSplit:
    def test_split_counts(self):
        assert dataset.split_counts(60) == [40, 10, 10]
        assert dataset.split_counts(18) == [12, 3, 3]
        assert sum(dataset.split_counts(17)) == 17

    def test_stratified_four_one_one(self, small_config):
        parts = dataset.split(dataset.generate(small_config, 60, 60), seed=1)
        for part, expected in zip(parts, (40, 10, 10)):
            labels = [sample.label for sample in part]
            assert labels.count(SliceLabel.NODULE) == expected
            assert labels.count(SliceLabel.NO_NODULE) == expected

    def test_parts_partition_the_samples(self, small_config):
        samples = dataset.generate(small_config, 12, 9)
        parts = dataset.split(samples, seed=2)
        ids = [sample.sample_id for part in parts for sample in part]
        assert sorted(ids) == list(range(21))
        for part in parts:
            assert [sample.sample_id for sample in part] == sorted(sample.sample_id for sample in part)

    def test_same_seed_same_split(self, small_config):
        samples = dataset.generate(small_config, 12, 12)
        first, second = dataset.split(samples, seed=4), dataset.split(samples, seed=4)
        for a, b in zip(first, second):
            assert [sample.sample_id for sample in a] == [sample.sample_id for sample in b]

    def test_too_few_samples(self, small_config):
        with pytest.raises(DataError):
            dataset.split(dataset.generate(small_config, 3, 2), seed=0)

    def test_single_class(self, small_config):
        with pytest.raises(DataError):
            dataset.split(dataset.generate(small_config, 0, 12), seed=0)

    def test_class_smaller_than_split_count(self, small_config):
        with pytest.raises(DataError):
            dataset.split(dataset.generate(small_config, 10, 2), seed=0)
