import numpy as np
import pytest

from tilechange import nn
from tilechange.errors import DomainError, ShapeError
from tilechange.nn.tensor import Tensor


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_ones_valid_sums_window(self):
        x = t64(np.ones((1, 1, 3, 3)))
        w = t64(np.ones((1, 1, 3, 3)))
        y = nn.conv2d(x, w, padding="valid")
        assert y.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel_same(self):
        rng = np.random.default_rng(0)
        x = t64(rng.normal(size=(2, 3, 8, 8)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = nn.conv2d(x, t64(w), padding="same")
        np.testing.assert_array_equal(y.data, x.data)

    def test_dilated_taps_hand_evaluated(self):
        # 5x5 input, 3x3 kernel of ones, dilation 2, valid: one output equal to
        # the sum of the 9 samples at rows/cols {0, 2, 4}
        rng = np.random.default_rng(1)
        xv = rng.normal(size=(1, 1, 5, 5))
        y = nn.conv2d(t64(xv), t64(np.ones((1, 1, 3, 3))), dilation=2, padding="valid")
        assert y.shape == (1, 1, 1, 1)
        expected = xv[0, 0, ::2, ::2].sum()
        assert y.data[0, 0, 0, 0] == pytest.approx(expected, rel=1e-12)

    def test_same_preserves_shape_for_any_odd_kernel_and_dilation(self):
        rng = np.random.default_rng(2)
        x = t64(rng.normal(size=(1, 2, 9, 9)))
        for k in (1, 3, 5):
            for d in (1, 2, 3):
                w = t64(rng.normal(size=(4, 2, k, k)))
                assert nn.conv2d(x, w, dilation=d, padding="same").shape == (1, 4, 9, 9)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            nn.conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 2, 2))))

    def test_valid_too_small_input(self):
        with pytest.raises(ShapeError):
            nn.conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 3, 3))), dilation=2, padding="valid")

    def test_stride_two(self):
        x = t64(np.arange(36, dtype=np.float64).reshape(1, 1, 6, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = nn.conv2d(x, t64(w), stride=2, padding="same")
        assert y.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(y.data[0, 0], x.data[0, 0, ::2, ::2])


class TestGaussianLowpass:
    def test_constant_preserved(self):
        x = t64(np.full((1, 2, 9, 9), 0.37))
        y = nn.gaussian_lowpass(x)
        np.testing.assert_allclose(y.data, 0.37, atol=1e-12)

    def test_kernel_normalized(self):
        assert nn.gaussian_kernel(5, 1.0).sum() == pytest.approx(1.0, abs=1e-12)
        assert nn.gaussian_kernel(7, 2.0).sum() == pytest.approx(1.0, abs=1e-12)

    def test_impulse_response_is_kernel(self):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        y = nn.gaussian_lowpass(t64(x), kernel_size=5, sigma=1.0)
        np.testing.assert_allclose(y.data[0, 0, 2:7, 2:7], nn.gaussian_kernel(5, 1.0), atol=1e-15)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            nn.gaussian_lowpass(t64(np.ones((1, 1, 8, 8))), kernel_size=4)


class TestBlurpool:
    def test_constant_dc_gain_and_shape(self):
        y = nn.blurpool_downsample(t64(np.full((1, 3, 32, 32), 0.61)))
        assert y.shape == (1, 3, 16, 16)
        np.testing.assert_allclose(y.data, 0.61, atol=1e-12)

    def test_alternating_stripes_cancel(self):
        x = np.tile(np.array([1.0, -1.0]), (8, 4)).reshape(1, 1, 8, 8)
        y = nn.blurpool_downsample(t64(x))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-15)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            nn.blurpool_downsample(t64(np.ones((1, 1, 7, 8))))


class TestPointwise:
    def test_leaky_relu_values(self):
        y = nn.leaky_relu(t64([2.0, -2.0, 0.0]))
        np.testing.assert_allclose(y.data, [2.0, -0.02, 0.0], atol=1e-15)

    def test_leaky_relu_grad_at_zero_is_one(self):
        x = t64([0.0])
        y = nn.sum_all(nn.leaky_relu(x))
        y.backward()
        assert x.grad[0] == 1.0

    def test_channel_norm_centers_and_scales(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(2.0, 3.0, size=(2, 4, 8, 8)))
        gamma = t64(np.ones(4))
        shift = t64(np.zeros(4))
        y = nn.channel_norm(x, gamma, shift)
        means = y.data.mean(axis=(2, 3))
        var = y.data.var(axis=(2, 3))
        np.testing.assert_allclose(means, 0.0, atol=1e-10)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_channel_norm_constant_channel_zero(self):
        x = t64(np.full((1, 1, 4, 4), 5.0))
        y = nn.channel_norm(x, t64(np.ones(1)), t64(np.zeros(1)))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-12)

    def test_linear_identity_and_bias(self):
        x = t64([1.0, 2.0])
        eye = t64(np.eye(2))
        zero = t64(np.zeros(2))
        np.testing.assert_array_equal(nn.linear(x, eye, zero).data, [1.0, 2.0])
        b = t64([3.0, -1.0])
        np.testing.assert_array_equal(nn.linear(x, t64(np.zeros((2, 2))), b).data, [3.0, -1.0])

    def test_linear_hand_product(self):
        y = nn.linear(t64([1.0, 1.0]), t64([[1.0, 2.0], [3.0, 4.0]]), t64([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [3.0, 7.0])

    def test_upsample_replicates(self):
        y = nn.nn_upsample(t64(np.array([[[[7.0]]]])), factor=2)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))

    def test_upsample_then_stride_recovers(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 16, 16))
        y = nn.nn_upsample(t64(x), factor=2)
        assert y.shape == (1, 2, 32, 32)
        np.testing.assert_array_equal(y.data[:, :, ::2, ::2], x)

    def test_global_avg_pool(self):
        x = np.zeros((1, 2, 2, 2))
        x[0, 0] = 0.5
        x[0, 1] = [[0.0, 1.0], [0.0, 1.0]]
        y = nn.global_avg_pool(t64(x))
        np.testing.assert_allclose(y.data, [[0.5, 0.5]], atol=1e-15)

    def test_pool_linearity(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 3, 4, 4))
        a = nn.global_avg_pool(t64(3.0 * x)).data
        b = 3.0 * nn.global_avg_pool(t64(x)).data
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestStructural:
    def test_concat_and_split_grads(self):
        a = t64(np.ones((1, 2, 2, 2)))
        b = t64(np.full((1, 3, 2, 2), 2.0))
        y = nn.concat([a, b], axis=1)
        assert y.shape == (1, 5, 2, 2)
        nn.sum_all(nn.mul(y, y)).backward()
        np.testing.assert_allclose(a.grad, 2.0, atol=1e-15)
        np.testing.assert_allclose(b.grad, 4.0, atol=1e-15)

    def test_clamp_gradient_mask(self):
        x = t64([-11.0, 0.0, 11.0])
        y = nn.clamp(x, -10.0, 10.0)
        np.testing.assert_array_equal(y.data, [-10.0, 0.0, 10.0])
        nn.sum_all(y).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_residual_add_accumulates_both_paths(self):
        x = t64(np.ones((1, 1, 2, 2)))
        y = nn.add(nn.scale(x, 2.0), x)
        nn.sum_all(y).backward()
        np.testing.assert_allclose(x.grad, 3.0, atol=1e-15)

    def test_mixed_dtype_rejected(self):
        x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
        w = t64(np.ones((1, 1, 3, 3)))
        with pytest.raises(DomainError):
            nn.conv2d(x, w)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = t64(np.ones((1, 1, 4, 4)))
        with nn.no_grad():
            y = nn.scale(x, 2.0)
        assert not y.requires_grad
        assert y._parents == ()
