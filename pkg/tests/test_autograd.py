import itertools

import numpy as np
import pytest

from models.errors import InvalidInputError
from services.autograd import (
    Tensor, concat, conv3d, conv_transpose3d, max_pool3d, no_grad, parameter,
)
from services.tsnet_service import gradcheck


def reference_conv(x, w, bias=None, stride=1, pad=0, groups=1):
    """Loop-by-loop grouped cross-correlation."""
    n, c_in, *spatial = x.shape
    c_out, c_in_g, kx, ky, kz = w.shape
    c_out_g = c_out // groups
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    out_shape = [(s + 2 * pad - k) // stride + 1 for s, k in zip(spatial, (kx, ky, kz))]
    out = np.zeros((n, c_out, *out_shape))
    for b in range(n):
        for co in range(c_out):
            g = co // c_out_g
            for ox, oy, oz in itertools.product(*(range(m) for m in out_shape)):
                total = 0.0 if bias is None else bias[co]
                for ci in range(c_in_g):
                    for i, j, k in itertools.product(range(kx), range(ky), range(kz)):
                        total += w[co, ci, i, j, k] * xp[b, g * c_in_g + ci, ox * stride + i, oy * stride + j, oz * stride + k]
                out[b, co, ox, oy, oz] = total
    return out


class TestTensor:
    def test_arithmetic_gradients(self):
        x = parameter(np.array([1.0, 2.0, 3.0]))
        y = parameter(np.array([4.0, 5.0, 6.0]))
        loss = ((x * y) + (x / y) - y ** 2.0).sum()
        loss.backward()
        np.testing.assert_allclose(x.grad, y.data + 1.0 / y.data)
        np.testing.assert_allclose(y.grad, x.data - x.data / y.data ** 2 - 2.0 * y.data)

    def test_broadcast_gradient_is_summed(self):
        x = parameter(np.ones((2, 3)))
        b = parameter(np.zeros((1, 3)))
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [[2.0, 2.0, 2.0]])

    def test_shared_subgraph_accumulates(self):
        x = parameter(np.array(3.0))
        h = x * x
        (h + h).backward()
        assert x.grad == pytest.approx(12.0)

    def test_backward_needs_scalar(self):
        with pytest.raises(InvalidInputError):
            (parameter(np.ones(3)) * 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = parameter(np.ones(3))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_relu_and_sigmoid(self):
        x = parameter(np.array([-1.0, 0.5, 2.0]))
        out = x.relu()
        assert np.all(out.data >= 0)
        (out.sum() + x.sigmoid().sum()).backward()
        s = 1.0 / (1.0 + np.exp(-x.data))
        np.testing.assert_allclose(x.grad, (x.data > 0) + s * (1 - s))

    def test_concat_routes_gradient(self):
        a, b = parameter(np.ones((1, 2, 1))), parameter(np.ones((1, 3, 1)))
        weights = np.arange(5.0).reshape(1, 5, 1)
        (concat([a, b], axis=1) * weights).sum().backward()
        np.testing.assert_array_equal(a.grad.ravel(), [0.0, 1.0])
        np.testing.assert_array_equal(b.grad.ravel(), [2.0, 3.0, 4.0])

    def test_mean_gradient(self):
        x = parameter(np.ones((2, 4)))
        x.mean(axis=1).sum().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 4), 0.25))

    def test_composite_passes_gradcheck(self, rng):
        x = parameter(rng.normal(size=(3, 4)))
        y = parameter(rng.uniform(1.0, 2.0, size=(3, 4)))
        report = gradcheck(lambda: ((x * y + x / y) ** 2.0).mean(), [("x", x), ("y", y)], n_samples=20)
        assert report.passed, report.max_rel_error


class TestConv3d:
    def test_unit_kernel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 5, 6)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1, 1))
        np.testing.assert_array_equal(conv3d(x, w).data, x.data)

    def test_depthwise_ones_on_constant(self):
        c = 1.5
        x = Tensor(np.full((1, 2, 5, 5, 5), c))
        w = Tensor(np.ones((2, 1, 3, 3, 3)))
        out = conv3d(x, w, padding="same", groups=2)
        assert out.data[0, 0, 2, 2, 2] == pytest.approx(27 * c)
        assert out.data[0, 1, 0, 0, 0] == pytest.approx(8 * c)

    @pytest.mark.parametrize("stride, pad, groups", [(1, 1, 1), (1, 0, 2), (2, 1, 2), (1, 1, 4)])
    def test_matches_loop_reference(self, rng, stride, pad, groups):
        x = rng.normal(size=(2, 4, 5, 4, 3))
        w = rng.normal(size=(4, 4 // groups, 3, 3, 3))
        bias = rng.normal(size=4)
        out = conv3d(Tensor(x), Tensor(w), Tensor(bias), stride=stride, padding=pad, groups=groups)
        np.testing.assert_allclose(out.data, reference_conv(x, w, bias, stride, pad, groups), atol=1e-12)

    def test_grouped_equals_block_diagonal(self, rng):
        x = rng.normal(size=(1, 4, 4, 4, 4))
        w = rng.normal(size=(6, 2, 3, 3, 3))
        full = np.zeros((6, 4, 3, 3, 3))
        full[:3, :2] = w[:3]
        full[3:, 2:] = w[3:]
        grouped = conv3d(Tensor(x), Tensor(w), padding="same", groups=2).data
        dense = conv3d(Tensor(x), Tensor(full), padding="same").data
        np.testing.assert_allclose(grouped, dense, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            conv3d(Tensor(rng.normal(size=(1, 3, 4, 4, 4))), Tensor(np.ones((2, 2, 3, 3, 3))), groups=2)

    def test_needs_five_dims(self):
        with pytest.raises(InvalidInputError):
            conv3d(Tensor(np.ones((3, 4, 4, 4))), Tensor(np.ones((1, 3, 1, 1, 1))))


class TestPoolingAndUpsampling:
    def test_constant_pool(self):
        out = max_pool3d(Tensor(np.full((1, 2, 8, 8, 16), 0.3)))
        assert out.shape == (1, 2, 4, 4, 8)
        assert np.all(out.data == 0.3)

    def test_pool_dominates_window_mean(self, rng):
        x = rng.normal(size=(1, 3, 4, 6, 8))
        out = max_pool3d(Tensor(x)).data
        mean = x.reshape(1, 3, 2, 2, 3, 2, 4, 2).mean(axis=(3, 5, 7))
        assert np.all(out >= mean)

    def test_pool_gradient_goes_to_first_max(self):
        x = parameter(np.ones((1, 1, 2, 2, 2)))
        max_pool3d(x).sum().backward()
        assert x.grad[0, 0, 0, 0, 0] == 1.0 and x.grad.sum() == 1.0

    def test_odd_dims_rejected(self):
        with pytest.raises(InvalidInputError):
            max_pool3d(Tensor(np.ones((1, 1, 3, 4, 4))))

    def test_transposed_conv_matches_zero_stuffed_conv(self, rng):
        x = rng.normal(size=(2, 3, 3, 2, 4))
        w = rng.normal(size=(3, 5, 2, 2, 2))
        out = conv_transpose3d(Tensor(x), Tensor(w)).data
        assert out.shape == (2, 5, 6, 4, 8)

        stuffed = np.zeros((2, 3, 6, 4, 8))
        stuffed[:, :, ::2, ::2, ::2] = x
        stuffed = np.pad(stuffed, [(0, 0), (0, 0), (1, 0), (1, 0), (1, 0)])
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        direct = conv3d(Tensor(stuffed), Tensor(flipped)).data
        np.testing.assert_allclose(out, direct, atol=1e-12)

    def test_transposed_conv_weight_shape_checked(self, rng):
        with pytest.raises(InvalidInputError):
            conv_transpose3d(Tensor(rng.normal(size=(1, 3, 2, 2, 2))), Tensor(np.ones((2, 3, 2, 2, 2))))
