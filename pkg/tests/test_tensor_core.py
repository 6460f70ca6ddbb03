"""Tests for the deterministic kernels."""

import numpy as np
import pytest

from shift_memory_segmentation.exceptions import NonFiniteValueError, ShapeMismatchError
from shift_memory_segmentation.tensor_core import (
    ConvKernel,
    FeatureMap,
    LabelMap,
    NormParams,
    argmax_channels,
    bitwise_equal,
    check_finite,
    concat_channels,
    conv_pair,
    conv_spatial,
    first_difference,
    norm_act,
    spatial_pool,
    temporal_max,
    upsample_nearest,
)

F = np.float32


def _line_taps(x, c, pos):
    width = x.shape[1]
    return [x[c, pos + dx] if pos + dx < width else F(0) for dx in (0, 1)]


def _frame_taps(x, c, row, col):
    height, width = x.shape[1:]
    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            inside = row + dy < height and col + dx < width
            taps.append(x[c, row + dy, col + dx] if inside else F(0))
    return taps


def scalar_conv(inputs, kernel, cell_taps):
    """Reference convolution: one float32 product and one float32 add at a time."""
    out_channels, in_channels, temporal_taps, _ = kernel.weights.shape
    spatial = inputs[0].shape[1:]
    out = np.zeros((out_channels,) + spatial, dtype=F)
    for o in range(out_channels):
        for index in np.ndindex(*spatial):
            acc = F(0)
            for c in range(in_channels):
                for tap in range(temporal_taps):
                    values = cell_taps(inputs[tap], c, *index)
                    for s, value in enumerate(values):
                        acc = F(acc + F(kernel.weights[o, c, tap, s] * F(value)))
            out[(o,) + index] = F(acc + kernel.bias[o])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestFeatureMap:
    def test_data_is_read_only_float32(self):
        m = FeatureMap(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert m.data.dtype == np.float32
        assert m.channels == 2 and m.spatial_dims == (3,) and m.cells == 3
        with pytest.raises(ValueError):
            m.data[0, 0] = 1.0

    def test_bad_rank_rejected(self):
        with pytest.raises(ShapeMismatchError):
            FeatureMap(np.zeros(4))

    def test_zero_channels_allowed(self):
        m = FeatureMap.zeros(0, (4,))
        assert m.channels == 0 and m.scalars == 0


class TestConvPair:
    def test_line_matches_sequential_reference(self, rng):
        lag = rng.random((3, 8), dtype=F)
        new = rng.random((3, 8), dtype=F)
        kernel = ConvKernel(
            rng.standard_normal((4, 3, 2, 2)).astype(F), rng.random(4, dtype=F), 2, 1
        )
        out = conv_pair(FeatureMap(lag), FeatureMap(new), kernel)
        expected = scalar_conv([lag, new], kernel, _line_taps)
        assert np.array_equal(out.data.view(np.uint32), expected.view(np.uint32))

    def test_frame_matches_sequential_reference(self, rng):
        lag = rng.random((2, 4, 6), dtype=F)
        new = rng.random((2, 4, 6), dtype=F)
        kernel = ConvKernel(
            rng.standard_normal((3, 2, 2, 4)).astype(F), rng.random(3, dtype=F), 2, 2
        )
        out = conv_pair(FeatureMap(lag), FeatureMap(new), kernel)
        expected = scalar_conv([lag, new], kernel, _frame_taps)
        assert np.array_equal(out.data.view(np.uint32), expected.view(np.uint32))

    def test_close_to_double_precision(self, rng):
        lag = rng.random((2, 16), dtype=F)
        new = rng.random((2, 16), dtype=F)
        weights = rng.standard_normal((2, 2, 2, 2)).astype(F)
        kernel = ConvKernel(weights, np.zeros(2, F), 2, 1)
        out = conv_pair(FeatureMap(lag), FeatureMap(new), kernel)
        taps = np.stack(
            [
                np.stack([np.pad(x, ((0, 0), (0, 1)))[:, dx : dx + 16] for dx in (0, 1)], axis=1)
                for x in (lag, new)
            ],
            axis=1,
        ).astype(np.float64)
        ref = np.einsum("ocks,cksx->ox", weights.astype(np.float64), taps)
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-5)

    def test_running_sum_is_float32_not_rounded_double(self):
        eps = F(2.0**-24)
        lag = np.array([[1.0], [eps]], dtype=F)
        new = np.array([[eps], [0.0]], dtype=F)
        kernel = ConvKernel(np.ones((1, 2, 2, 1), F), np.zeros(1, F), 1, 1)
        out = conv_pair(FeatureMap(lag), FeatureMap(new), kernel)
        # 1 + eps ties to 1 at each float32 step; in double the two eps survive
        assert out.data[0, 0] == F(1.0)
        assert F(1.0 + 2.0 * 2.0**-24) != F(1.0)

    def test_zero_kernel_gives_bias(self):
        kernel = ConvKernel(np.zeros((2, 1, 2, 2), F), np.array([0.25, -1.0], F), 2, 1)
        out = conv_pair(FeatureMap(np.ones((1, 4))), FeatureMap(np.ones((1, 4))), kernel)
        assert np.all(out.data[0] == F(0.25)) and np.all(out.data[1] == F(-1.0))

    def test_channel_mismatch(self):
        kernel = ConvKernel(np.zeros((1, 2, 2, 2), F), np.zeros(1, F), 2, 1)
        with pytest.raises(ShapeMismatchError):
            conv_pair(FeatureMap(np.ones((1, 4))), FeatureMap(np.ones((1, 4))), kernel)

    def test_shape_mismatch(self):
        kernel = ConvKernel(np.zeros((1, 1, 2, 2), F), np.zeros(1, F), 2, 1)
        with pytest.raises(ShapeMismatchError):
            conv_pair(FeatureMap(np.ones((1, 4))), FeatureMap(np.ones((1, 6))), kernel)

    def test_nan_rejected(self):
        kernel = ConvKernel(np.zeros((1, 1, 2, 2), F), np.zeros(1, F), 2, 1)
        bad = np.ones((1, 4), F)
        bad[0, 2] = np.nan
        with pytest.raises(NonFiniteValueError):
            conv_pair(FeatureMap(np.ones((1, 4))), FeatureMap(bad), kernel)


class TestConvSpatial:
    def test_classifier_matches_reference(self, rng):
        x = rng.random((5, 4), dtype=F)
        kernel = ConvKernel(
            rng.standard_normal((3, 5, 1, 1)).astype(F), rng.random(3, dtype=F), 1, 1
        )
        out = conv_spatial(FeatureMap(x), kernel)

        def taps(m, c, pos):
            return [m[c, pos]]

        expected = scalar_conv([x], kernel, taps)
        assert np.array_equal(out.data.view(np.uint32), expected.view(np.uint32))

    def test_needs_single_temporal_tap(self):
        kernel = ConvKernel(np.zeros((1, 1, 2, 2), F), np.zeros(1, F), 2, 1)
        with pytest.raises(ShapeMismatchError):
            conv_spatial(FeatureMap(np.ones((1, 4))), kernel)


class TestNormAct:
    def test_identity_is_relu(self):
        m = FeatureMap(np.array([[-1.0, 0.0, 2.0]], F))
        out = norm_act(m, NormParams.identity(1, 0.0))
        assert out.data.tolist() == [[0.0, 0.0, 2.0]]

    def test_matches_float32_formula(self, rng):
        x = rng.standard_normal((2, 5)).astype(F)
        p = NormParams(
            np.array([1.5, 0.5], F), np.array([0.1, -0.2], F),
            np.array([0.3, -0.1], F), np.array([2.0, 0.5], F), 1e-5,
        )
        out = norm_act(FeatureMap(x), p)
        for c in range(2):
            scale = np.sqrt(F(p.variance[c] + p.epsilon))
            for i in range(5):
                y = F(F(F(p.gamma[c] * F(x[c, i] - p.mean[c])) / scale) + p.beta[c])
                assert out.data[c, i] == max(y, F(0))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            norm_act(FeatureMap(np.ones((2, 4))), NormParams.identity(3))


class TestPooling:
    def test_temporal_max(self):
        a = FeatureMap(np.array([[1.0, 5.0]], F))
        b = FeatureMap(np.array([[3.0, 2.0]], F))
        assert temporal_max(a, b).data.tolist() == [[3.0, 5.0]]

    def test_spatial_pool_line(self):
        m = FeatureMap(np.array([[1, 4, 2, 3, 0, -1]], F))
        assert spatial_pool(m).data.tolist() == [[4, 3, 0]]

    def test_spatial_pool_frame(self):
        m = FeatureMap(np.arange(16, dtype=F).reshape(1, 4, 4))
        assert spatial_pool(m).data.tolist() == [[[5, 7], [13, 15]]]

    def test_spatial_pool_odd(self):
        with pytest.raises(ShapeMismatchError):
            spatial_pool(FeatureMap(np.ones((1, 5))))

    def test_upsample_nearest(self):
        m = FeatureMap(np.array([[[1, 2], [3, 4]]], F))
        assert upsample_nearest(m).data[0].tolist() == [
            [1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]
        ]

    def test_concat_channels(self):
        out = concat_channels(FeatureMap(np.zeros((2, 4))), FeatureMap(np.ones((3, 4))))
        assert out.channels == 5 and np.all(out.data[2:] == 1)
        with pytest.raises(ShapeMismatchError):
            concat_channels(FeatureMap(np.zeros((1, 4))), FeatureMap(np.ones((1, 2))))


class TestArgmax:
    def test_lowest_index_wins_ties(self):
        m = FeatureMap(np.array([[0.1], [0.9], [0.9]], F))
        assert argmax_channels(m).labels.tolist() == [1]

    def test_single_class(self):
        labels = argmax_channels(FeatureMap(np.ones((1, 6))))
        assert labels.labels.tolist() == [0] * 6 and labels.labels.dtype == np.uint8

    def test_label_range_enforced(self):
        with pytest.raises(ValueError):
            LabelMap(np.array([3], np.uint8), 3)


class TestComparison:
    def test_bitwise_equal_distinguishes_signed_zero(self):
        a = FeatureMap(np.array([[0.0]], F))
        b = FeatureMap(np.array([[-0.0]], F))
        assert not bitwise_equal(a, b)
        assert first_difference(a, b) == 0

    def test_first_difference(self):
        a = FeatureMap(np.zeros((2, 3)))
        data = np.zeros((2, 3), F)
        data[1, 1] = 1.0
        assert first_difference(a, FeatureMap(data)) == 4
        assert first_difference(a, a) is None

    def test_check_finite(self):
        with pytest.raises(NonFiniteValueError, match="sample"):
            check_finite(FeatureMap(np.array([[np.inf]])), "sample")
