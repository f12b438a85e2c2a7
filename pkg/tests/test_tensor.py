"""
Tests for the tensor autodiff engine: primitives, broadcasting, tape control and
finite-difference gradient checks.
"""
import numpy as np
import pytest

import tensor as T
from tensor import ShapeError, Tensor


def leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


# =============================================================================
# Precision and grad mode
# =============================================================================

class TestPrecision:

    def test_default_is_float64(self):
        assert Tensor([1.0]).data.dtype == np.float64

    def test_context_restores_previous(self):
        with T.precision("float32"):
            assert Tensor([1.0]).data.dtype == np.float32
            assert (Tensor([1.0]) * 2.0).data.dtype == np.float32
        assert T.get_precision() == np.float64

    def test_rejects_integer_precision(self):
        with pytest.raises(ValueError):
            T.set_precision(np.int32)

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 3)
        with T.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert T.is_grad_enabled()


# =============================================================================
# Elementwise primitives
# =============================================================================

class TestElementwise:

    @pytest.mark.parametrize("fn", [
        lambda t: (t * t * 3.0).sum(),
        lambda t: (T.exp(t) / (t * t + 1.0)).sum(),
        lambda t: T.tanh(t).sum() - T.sigmoid(t * 2.0).sum(),
        lambda t: (T.softplus(t) * t).sum(),
        lambda t: (T.erf(t) * T.erf(t)).sum(),
        lambda t: T.leaky_relu(t, 0.1).sum(),
        lambda t: (t ** 3).sum(),
    ])
    def test_grad_check(self, rng, fn):
        assert T.grad_check(fn, leaf(rng, 3, 4)) < 1e-4

    def test_log_and_sqrt(self, rng):
        x = leaf(rng, 5, low=0.5)
        assert T.grad_check(lambda t: (T.log(t) + T.sqrt(t)).sum(), x) < 1e-4

    def test_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_broadcast_mismatch_names_primitive(self):
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))

    def test_clamp_blocks_gradient_outside(self):
        x = Tensor([-2.0, 0.5, 3.0], requires_grad=True)
        T.clamp(x, 0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_where_routes_gradient(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        T.where(np.array([True, False]), a, b).sum().backward()
        np.testing.assert_array_equal(a.grad, [1.0, 0.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0])

    def test_masked_fill_zero_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (T.masked_fill(x, np.array([False, True, False]), -np.inf).exp()).sum().backward()
        assert x.grad[1] == 0.0


# =============================================================================
# Linear algebra, reductions, shape
# =============================================================================

class TestLinearAlgebra:

    def test_matmul_grad(self, rng):
        a, b = leaf(rng, 2, 3, 4), Tensor(rng.normal(size=(4, 5)))
        assert T.grad_check(lambda t: (t @ b).sum(), a) < 1e-4

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_softmax_rows_sum_to_one(self, rng):
        out = T.softmax(Tensor(rng.normal(size=(4, 6))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)

    def test_softmax_grad(self, rng):
        weights = rng.normal(size=(3, 5))
        assert T.grad_check(lambda t: (T.softmax(t) * weights).sum(), leaf(rng, 3, 5)) < 1e-4

    def test_mean_and_reshape_grad(self, rng):
        fn = lambda t: (t.reshape(6, 2).transpose() * 2.0).mean(axis=0).sum()  # noqa: E731
        assert T.grad_check(fn, leaf(rng, 3, 4)) < 1e-4

    def test_advanced_index_accumulates(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        x[np.array([0, 0, 1])].sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 1.0, 0.0])

    def test_concat_splits_gradient(self, rng):
        a, b = leaf(rng, 2, 2), leaf(rng, 2, 3)
        (T.concat([a, b], axis=1) * 2.0).sum().backward()
        np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((2, 3), 2.0))

    def test_gather_duplicate_indices(self):
        a = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
        out = T.gather(a, np.array([[2, 2, 0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 3.0, 1.0]])
        out.sum().backward()
        np.testing.assert_array_equal(a.grad, [[1.0, 0.0, 2.0]])

    def test_backward_requires_scalar(self, rng):
        with pytest.raises(ValueError):
            (leaf(rng, 3) * 2.0).backward()


# =============================================================================
# Top-k
# =============================================================================

class TestTopK:

    def test_ties_keep_lowest_index(self):
        keep = T.topk_keep_mask(np.array([[1.0, 3.0, 3.0, 3.0]]), 2)
        np.testing.assert_array_equal(keep, [[False, True, True, False]])

    def test_k_at_least_width_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 4)))
        assert T.topk_select(x, 4) is x

    def test_select_fills_rest_with_inf(self):
        out = T.topk_select(Tensor([[0.1, 0.9, 0.5]]), 1)
        assert out.data[0, 1] == 0.9
        assert np.isneginf(out.data[0, [0, 2]]).all()

    def test_rejects_k_zero(self):
        with pytest.raises(ValueError):
            T.topk_select(Tensor([[1.0]]), 0)


# =============================================================================
# Convolution
# =============================================================================

def brute_conv(x, w, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, _, h, wd = xp.shape
    o, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for p in range(oh):
        for q in range(ow):
            patch = xp[:, :, p * stride:p * stride + kh, q * stride:q * stride + kw]
            out[:, :, p, q] = np.einsum("bcij,ocij->bo", patch, w)
    return out


class TestConvolution:

    def test_conv2d_matches_brute_force(self, rng):
        x, w = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        np.testing.assert_allclose(out.data, brute_conv(x, w, 2, 1), atol=1e-10)

    def test_grouped_conv_is_depthwise(self, rng):
        x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), padding=1, groups=2)
        for c in range(2):
            expected = brute_conv(x[:, c:c + 1], w[c:c + 1], 1, 1)
            np.testing.assert_allclose(out.data[:, c:c + 1], expected, atol=1e-10)

    def test_conv2d_grad(self, rng):
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        fn = lambda t: (T.conv2d(t, w, stride=2, padding=1) ** 2).sum()  # noqa: E731
        assert T.grad_check(fn, leaf(rng, 1, 2, 5, 5)) < 1e-4

    def test_conv2d_weight_grad(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        fn = lambda t: (T.conv2d(x, t, padding=2) ** 2).sum()  # noqa: E731
        assert T.grad_check(fn, leaf(rng, 3, 2, 5, 5), max_coords=40) < 1e-4

    def test_transpose_is_adjoint_of_conv(self, rng):
        x, y = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(3, 2, 5, 5))
        forward = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=2).data
        adjoint = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=2, output_padding=1).data
        assert adjoint.shape == x.shape
        np.testing.assert_allclose(np.sum(forward * y), np.sum(x * adjoint), rtol=1e-10)

    def test_conv_transpose_grad(self, rng):
        w = Tensor(rng.normal(size=(2, 2, 3, 3)))
        fn = lambda t: (T.conv_transpose2d(t, w, stride=2, padding=1, output_padding=1) ** 2).sum()  # noqa: E731
        assert T.grad_check(fn, leaf(rng, 1, 2, 3, 3)) < 1e-4


# =============================================================================
# Debugging helpers
# =============================================================================

class TestDebugging:

    def test_grad_check_needs_requires_grad(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda t: t.sum(), Tensor([1.0]))

    def test_grad_check_flags_wrong_gradient(self, rng):
        x = leaf(rng, 4)

        def wrong(t):
            # gradient of t^2 reported, value of t^3 computed
            value = Tensor._result(t.data ** 3, (t,), lambda g: (g * 2 * t.data,), "bad")
            return value.sum()

        assert T.grad_check(wrong, x) > 1e-2

    def test_dump_graph(self, rng, tmp_path):
        x = leaf(rng, 2)
        path = T.dump_graph((T.exp(x) * 2.0).sum(), tmp_path / "graph.txt")
        text = path.read_text()
        assert "exp(" in text and "sum(" in text
