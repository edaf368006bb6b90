"""Layer contracts: shape algebra, the standard extractor, normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milbag import tensor as T
from milbag.errors import DimensionError
from milbag.layers import (build_extractor, conv_layer, conv_output_hw, fc_layer,
                           forward_layer, forward_stack, minmax_normalize, pool_layer)
from milbag.tensor import Tensor


class TestShapeAlgebra:
    def test_conv_60_to_56(self):
        rng = np.random.default_rng(0)
        layer = conv_layer(rng, "conv1", 1, 36, 5)
        out = forward_layer(Tensor(np.zeros((1, 1, 60, 60), dtype=np.float32)), layer)
        assert out.shape == (1, 36, 56, 56)

    def test_pool_56_to_28(self):
        out = forward_layer(Tensor(np.zeros((1, 36, 56, 56), dtype=np.float32)),
                            pool_layer("pool", 2, 2))
        assert out.shape == (1, 36, 28, 28)

    def test_standard_stack_feature_length(self):
        # spatial trace 60 -> 56 -> 28 -> 24 -> 12 -> 8 -> 4; flatten 48*4*4=768
        rng = np.random.default_rng(0)
        layers = build_extractor(rng)
        assert layers[-1].weight.shape == (512, 768)
        x = Tensor(rng.random((1, 60, 60, 1), dtype=np.float32))
        assert forward_stack(x, layers).shape == (1, 512)

    def test_100_random_conv_pool_configs(self):
        """Output shapes match the closed-form arithmetic for random configs."""
        rng = np.random.default_rng(123)
        for _ in range(100):
            k = int(rng.integers(1, 6))
            stride = int(rng.integers(1, 4))
            padding = int(rng.integers(0, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 5))
            hw = int(rng.integers(max(k - 2 * padding, 1), 20))
            if hw + 2 * padding < k:
                continue
            layer = conv_layer(rng, "c", cin, cout, k, stride=stride, padding=padding)
            x = Tensor(rng.random((2, cin, hw, hw), dtype=np.float32))
            expect = conv_output_hw(hw, k, stride, padding)
            assert forward_layer(x, layer).shape == (2, cout, expect, expect)
            pk = int(rng.integers(1, 4))
            ps = int(rng.integers(1, 4))
            if hw >= pk:
                pool = pool_layer("p", pk, ps)
                pout = forward_layer(x, pool)
                assert pout.shape == (2, cin, (hw - pk) // ps + 1, (hw - pk) // ps + 1)

    def test_conv_channel_mismatch_names_layer(self):
        rng = np.random.default_rng(0)
        layer = conv_layer(rng, "conv2", 36, 36, 5)
        with pytest.raises(DimensionError, match="conv2"):
            forward_layer(Tensor(np.zeros((1, 3, 28, 28), dtype=np.float32)), layer)

    def test_fc_requires_2d(self):
        rng = np.random.default_rng(0)
        layer = fc_layer(rng, "fc1", 768, 512)
        with pytest.raises(DimensionError, match="fc1"):
            forward_layer(Tensor(np.zeros((1, 48, 4, 4), dtype=np.float32)), layer)


class TestFastPathEquivalence:
    def test_forward_stack_matches_layer_chain_bitwise(self):
        rng = np.random.default_rng(5)
        layers = build_extractor(rng)
        patches = rng.random((6, 60, 60), dtype=np.float32)
        with T.no_grad():
            fast = forward_stack(Tensor(patches[..., None]), layers)
            y = Tensor(patches[:, None, :, :])
            for lp in layers:
                if lp.kind == "fully_connected" and y.data.ndim == 4:
                    y = T.flatten_nchw(T.permute(y, (0, 2, 3, 1)))
                y = forward_layer(y, lp)
        assert np.array_equal(fast.data, y.data)


class TestInitialization:
    def test_biases_zero_weights_bounded(self):
        rng = np.random.default_rng(0)
        layers = build_extractor(rng)
        for lp in layers:
            if lp.bias is not None:
                assert not lp.bias.data.any()
        conv1 = layers[0]
        fan_in, fan_out = 1 * 25, 36 * 25
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(conv1.weight.data).max() <= limit
        assert np.abs(conv1.weight.data).max() > 0.5 * limit  # actually spread out


class TestMinmaxNormalize:
    def test_range_endpoints(self):
        patch = np.arange(100.0, 301.0).reshape(1, -1)
        out = minmax_normalize(patch)
        assert out.max() == 1.0 and out.min() == 0.0

    def test_constant_patch_maps_to_zeros(self):
        assert not minmax_normalize(np.full((4, 4), 7.0)).any()

    def test_three_values(self):
        np.testing.assert_allclose(minmax_normalize(np.array([2.0, 4.0, 6.0])),
                                   [0.0, 0.5, 1.0])

    def test_tensor_in_tensor_out(self):
        out = minmax_normalize(Tensor(np.array([0.0, 2.0])))
        assert isinstance(out, Tensor)
        np.testing.assert_array_equal(out.data, [0.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                    min_size=1, max_size=50))
    def test_output_always_in_unit_interval(self, values):
        out = minmax_normalize(np.array(values))
        assert out.min() >= 0.0 and out.max() <= 1.0
