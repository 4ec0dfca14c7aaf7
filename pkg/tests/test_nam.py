import numpy as np
import pytest

import network
from conftest import disc
from errors import DimensionError, DomainError, NumericError
from models import ModelConfig, Nam, Scope, ScopeKind
from nam import compute_nam, compute_rnam, fill, nam_distance, read_nam, upsample_bilinear, write_nam


def two_channel_model() -> network.Model:
    # on a 4x4 image with 1 at (0,0) and 2 at (2,2): a_1 = [[1,0],[0,0]], a_2 = [[0,0],[0,1]]
    config = ModelConfig(input_size=(4, 4), stage_channels=[2], gap_taps=[0], head_channels=2)
    model = network.build(config, seed=0)
    (kernel0, bias0), (kernel1, bias1) = model.stages[0]
    kernel0.data[:] = 0.0
    kernel0.data[:, 0, 1, 1] = 1.0
    bias0.data[:] = [0.0, -1.0]
    kernel1.data[:] = 0.0
    kernel1.data[0, 0, 1, 1] = kernel1.data[1, 1, 1, 1] = 1.0
    bias1.data[:] = 0.0
    head_kernel, head_bias = model.heads[0]
    head_kernel.data[:] = 0.0
    head_kernel.data[0, 0, 1, 1] = 1.0
    head_kernel.data[0, 1, 1, 1] = -2.0
    head_kernel.data[1, 1, 1, 1] = 1.0
    head_bias.data[:] = 0.0
    model.fc_weight.data[:] = [[0.0, 0.0], [2.0, -1.0]]
    model.fc_bias.data[:] = 0.0
    return model


def flat_nam(values: np.ndarray) -> Nam:
    return Nam(map=np.asarray(values, dtype=np.float64), raw_maps=[], score=0.0)


def full_scope(shape) -> Scope:
    return Scope(mask=np.ones(shape, dtype=bool), kind=ScopeKind.ONE_GAP_C1, peak=(0, 0), peak_value=0.0)


class TestComputeNam:
    def test_weighted_sum_of_activations(self):
        image = np.zeros((1, 4, 4))
        image[0, 0, 0], image[0, 2, 2] = 1.0, 2.0
        result = compute_nam(two_channel_model(), image)
        np.testing.assert_allclose(result.raw_maps[0], [[2.0, 0.0], [0.0, -1.0]])
        assert result.score == pytest.approx(0.25)
        assert result.map.shape == (4, 4)
        assert result.map[0, 0] == pytest.approx(2.0 / 4)
        assert result.map[3, 3] == pytest.approx(-1.0 / 4)

    def test_zero_nodule_weights_give_zero_map(self, tiny_config, rng):
        model = network.build(tiny_config, seed=0)
        model.fc_weight.data[1] = 0.0
        result = compute_nam(model, rng.uniform(size=(1, 8, 8)))
        assert np.all(result.map == 0.0)
        assert result.score == 0.0

    @pytest.mark.parametrize("taps", [[2], [1, 2], [0, 1, 2]])
    def test_score_plus_bias_is_nodule_logit(self, taps):
        rng = np.random.default_rng(10 + len(taps))
        for trial in range(100):
            config = ModelConfig(
                input_size=(16, 16), stage_channels=rng.integers(1, 6, size=3).tolist(), gap_taps=taps,
                head_channels=int(rng.integers(1, 5)),
            )
            model = network.build(config, seed=trial)
            model.fc_bias.data[:] = rng.normal(size=2)
            image = rng.uniform(size=(1, 16, 16))
            logit = network.forward(model, image).logits.data[1]
            score = compute_nam(model, image).score
            assert abs(score + model.fc_bias.data[1] - logit) / (1 + abs(logit)) < 1e-9

    def test_map_is_linear_in_nodule_weights(self, tiny_config, rng):
        model = network.build(tiny_config, seed=3)
        image = rng.uniform(size=(1, 8, 8))
        original = compute_nam(model, image).map
        model.fc_weight.data[1] *= -2.5
        np.testing.assert_allclose(compute_nam(model, image).map, -2.5 * original, atol=1e-12)

    def test_non_finite_weights(self, tiny_config, rng):
        model = network.build(tiny_config, seed=0)
        model.fc_weight.data[1, 0] = np.nan
        with pytest.raises(NumericError):
            compute_nam(model, rng.uniform(size=(1, 8, 8)))

    def test_rejects_flat_image(self, tiny_config):
        with pytest.raises(DimensionError):
            compute_nam(network.build(tiny_config, seed=0), np.zeros((8, 8)))


class TestUpsample:
    def test_corners_are_aligned(self, rng):
        raw = rng.normal(size=(3, 4))
        upsampled = upsample_bilinear(raw, (9, 10))
        for corner in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
            assert upsampled[corner] == pytest.approx(raw[corner])

    def test_midpoint_is_interpolated(self):
        upsampled = upsample_bilinear(np.array([[0.0, 2.0], [4.0, 6.0]]), (3, 3))
        assert upsampled[1, 1] == pytest.approx(3.0)
        assert upsampled[0, 1] == pytest.approx(1.0)

    def test_peak_stays_near_raw_argmax(self, rng):
        for _ in range(20):
            raw = rng.normal(size=(4, 4))
            upsampled = upsample_bilinear(raw, (16, 16))
            row, col = np.unravel_index(np.argmax(raw), raw.shape)
            peak_row, peak_col = np.unravel_index(np.argmax(upsampled), upsampled.shape)
            assert abs(peak_row - row * 5) <= 5 and abs(peak_col - col * 5) <= 5


class TestResidualNam:
    def test_empty_mask_is_identity(self, tiny_config, rng):
        model = network.build(tiny_config, seed=0)
        image = rng.uniform(size=(1, 8, 8))
        original = compute_nam(model, image)
        residual = compute_rnam(model, image, np.zeros((8, 8), dtype=bool), 0.2)
        assert np.array_equal(original.map, residual.map)
        assert original.score == residual.score

    def test_full_mask_is_background_image(self, tiny_config, rng):
        model = network.build(tiny_config, seed=0)
        residual = compute_rnam(model, rng.uniform(size=(1, 8, 8)), np.ones((8, 8), dtype=bool), 0.2)
        np.testing.assert_array_equal(residual.map, compute_nam(model, np.full((1, 8, 8), 0.2)).map)

    def test_fill_leaves_input_untouched(self, rng):
        image = rng.uniform(size=(1, 8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:4, 2:4] = True
        filled = fill(image, mask, 0.2)
        assert np.all(filled[0][mask] == 0.2)
        assert np.array_equal(filled[0][~mask], image[0][~mask])
        assert not np.any(image[0][mask] == 0.2)

    def test_masking_the_blob_lowers_activation(self, bright_model):
        blob = disc((32, 32), (12, 18), 4)
        image = np.where(blob, 0.9, 0.2)[None]
        original = compute_nam(bright_model, image)
        residual = compute_rnam(bright_model, image, blob, 0.2)
        assert residual.map[blob].sum() < original.map[blob].sum()


class TestNamDistance:
    def test_identical_maps(self, rng):
        nam = flat_nam(rng.normal(size=(5, 5)))
        assert nam_distance(nam, nam, full_scope((5, 5))) == 0.0

    def test_three_pixels_apart(self):
        base = np.zeros((4, 4))
        shifted = base.copy()
        shifted[0, :3] = 2.0
        assert nam_distance(flat_nam(base), flat_nam(shifted), full_scope((4, 4))) == pytest.approx(12.0)

    def test_matches_loop_and_is_symmetric(self, rng):
        a, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
        mask = rng.random((6, 6)) < 0.5
        scope = Scope(mask=mask, kind=ScopeKind.ONE_GAP_C1, peak=(0, 0), peak_value=0.0)
        expected = sum((a[r, c] - b[r, c]) ** 2 for r in range(6) for c in range(6) if mask[r, c])
        assert nam_distance(flat_nam(a), flat_nam(b), scope) == pytest.approx(expected)
        assert nam_distance(flat_nam(b), flat_nam(a), scope) == pytest.approx(expected)

    def test_empty_scope(self):
        scope = Scope(mask=np.zeros((3, 3), dtype=bool), kind=ScopeKind.ONE_GAP_C1, peak=(0, 0), peak_value=0.0)
        with pytest.raises(DomainError):
            nam_distance(flat_nam(np.zeros((3, 3))), flat_nam(np.ones((3, 3))), scope)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nam_distance(flat_nam(np.zeros((3, 3))), flat_nam(np.zeros((4, 4))), full_scope((3, 3)))


def test_nam_dump_round_trip(tmp_path, rng):
    nam = flat_nam(rng.normal(size=(5, 7)))
    write_nam(nam, tmp_path / "nam.txt")
    assert np.array_equal(read_nam(tmp_path / "nam.txt"), nam.map)
