import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorcspnet.euclid import (ConvSpec, conv2d_blockwise_backward, conv2d_blockwise_forward,
                                 dense_backward, dense_forward, flatten_concat, relu_backward,
                                 relu_forward, softmax, softmax_ce, unflatten)

from conftest import fd_grad, rel_err


def naive_conv(grid, spec, w, b, block):
    B, W, cols = grid.shape
    F = cols // block
    Wo, Fo = W - spec.q + 1, F - spec.p + 1
    out = np.zeros((B, Wo, Fo, spec.r))
    for n in range(B):
        for i in range(Wo):
            for j in range(Fo):
                patch = grid[n, i:i + spec.q, j * block:(j + spec.p) * block]
                for c in range(spec.r):
                    out[n, i, j, c] = np.sum(patch * w[c].reshape(spec.q, spec.p * block))
                    out[n, i, j, c] += 0.0 if b is None else b[c]
    return out


class TestFlatten:
    def test_reference_shape(self):
        assert flatten_concat(np.zeros((2, 5, 9, 20, 20))).shape == (2, 5, 3600)

    def test_row_major_single_slice(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
        np.testing.assert_array_equal(flatten_concat(x), [[[1.0, 2.0, 3.0, 4.0]]])

    def test_band_concatenation_order(self, rng):
        x = rng.standard_normal((1, 2, 3, 2, 2))
        g = flatten_concat(x)
        np.testing.assert_array_equal(g[0, 1, 4:8], x[0, 1, 1].ravel())

    def test_round_trip(self, rng):
        x = rng.standard_normal((3, 4, 5, 3, 3))
        np.testing.assert_array_equal(unflatten(flatten_concat(x), 5, 3), x)


class TestConv:
    @pytest.mark.parametrize("W,F,p,q,r", [(5, 9, 9, 5, 10), (5, 9, 1, 2, 20), (3, 4, 1, 1, 2),
                                           (4, 3, 3, 2, 3)])
    def test_shape_law(self, W, F, p, q, r):
        spec = ConvSpec(p, q, r)
        assert spec.output_shape(W, F) == (W - q + 1, F - p + 1, r)

    def test_reference_shapes(self, rng):
        o = 4
        grid = rng.standard_normal((2, 5, 9 * o * o))
        out, _ = conv2d_blockwise_forward(grid, ConvSpec(9, 5, 10),
                                          rng.standard_normal((10, 5, 9, o * o)))
        assert out.shape == (2, 1, 1, 10)
        out, _ = conv2d_blockwise_forward(grid, ConvSpec(1, 2, 20),
                                          rng.standard_normal((20, 2, 1, o * o)))
        assert out.shape == (2, 4, 9, 20) and out[0].size == 720

    def test_zero_weights_give_bias(self, rng):
        grid = rng.standard_normal((2, 3, 4 * 4))
        b = np.array([1.5, -2.0])
        out, _ = conv2d_blockwise_forward(grid, ConvSpec(1, 2, 2), np.zeros((2, 2, 1, 4)), b)
        np.testing.assert_array_equal(out, np.broadcast_to(b, out.shape))

    @pytest.mark.parametrize("p,q", [(1, 1), (1, 2), (3, 2), (3, 3)])
    def test_matches_naive_loop(self, rng, p, q):
        block = 4
        grid = rng.standard_normal((2, 3, 3 * block))
        spec = ConvSpec(p, q, 2)
        w = rng.standard_normal((2, q, p, block))
        b = rng.standard_normal(2)
        out, _ = conv2d_blockwise_forward(grid, spec, w, b)
        np.testing.assert_allclose(out, naive_conv(grid, spec, w, b, block), atol=1e-12)

    @pytest.mark.parametrize("p,q", [(1, 2), (3, 1), (3, 3)])
    def test_backward_finite_differences(self, rng, p, q):
        block = 4
        grid = rng.standard_normal((2, 3, 3 * block))
        spec = ConvSpec(p, q, 2)
        w = rng.standard_normal((2, q, p, block))
        b = rng.standard_normal(2)
        out, ctx = conv2d_blockwise_forward(grid, spec, w, b)
        G = rng.standard_normal(out.shape)
        gx, gw, gb = conv2d_blockwise_backward(ctx, G)

        def loss(g=grid, ww=w, bb=b):
            return np.sum(G * conv2d_blockwise_forward(g, spec, ww, bb)[0])

        assert rel_err(gx, fd_grad(lambda v: loss(g=v), grid)) < 1e-5
        assert rel_err(gw, fd_grad(lambda v: loss(ww=v), w)) < 1e-5
        assert rel_err(gb, fd_grad(lambda v: loss(bb=v), b)) < 1e-5

    def test_no_bias_gradient_is_none(self, rng):
        out, ctx = conv2d_blockwise_forward(rng.standard_normal((1, 2, 8)), ConvSpec(1, 1, 1),
                                            rng.standard_normal((1, 1, 1, 4)))
        assert conv2d_blockwise_backward(ctx, np.ones(out.shape))[2] is None

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            ConvSpec(2, 1, 1).validate(3, 4)
        with pytest.raises(ValueError):
            ConvSpec(1, 4, 1).validate(3, 4)
        with pytest.raises(ValueError):
            ConvSpec(1, 1, 0).validate(3, 4)
        with pytest.raises(ValueError):
            conv2d_blockwise_forward(rng.standard_normal((1, 2, 10)), ConvSpec(1, 1, 1),
                                     rng.standard_normal((1, 1, 1, 4)))
        with pytest.raises(ValueError):
            conv2d_blockwise_forward(rng.standard_normal((1, 2, 8)), ConvSpec(1, 1, 2),
                                     rng.standard_normal((1, 1, 1, 4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.booleans(),
           st.integers(1, 3))
    def test_property_shape(self, W, F, r, full_width, o):
        p = F if full_width else 1
        q = 1 + (W - 1) // 2
        grid = np.ones((1, W, F * o * o))
        out, _ = conv2d_blockwise_forward(grid, ConvSpec(p, q, r), np.ones((r, q, p, o * o)))
        assert out.shape[1:] == (W - q + 1, F - p + 1, r)


class TestDense:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(dense_forward(x, np.eye(4), np.zeros(4))[0], x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.0, 2.0])
        np.testing.assert_array_equal(dense_forward(np.zeros((1, 3)), np.ones((2, 3)), b)[0],
                                      [b])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dense_forward(np.zeros((1, 3)), np.zeros((2, 4)))

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
        G = rng.standard_normal((3, 4))
        _, ctx = dense_forward(x, w, b)
        gx, gw, gb = dense_backward(ctx, G)
        assert rel_err(gx, fd_grad(lambda v: np.sum(G * dense_forward(v, w, b)[0]), x)) < 1e-6
        assert rel_err(gw, fd_grad(lambda v: np.sum(G * dense_forward(x, v, b)[0]), w)) < 1e-6
        assert rel_err(gb, fd_grad(lambda v: np.sum(G * dense_forward(x, w, v)[0]), b)) < 1e-6

    def test_relu(self):
        y, mask = relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu_backward(mask, np.ones(3)), [0.0, 0.0, 1.0])


class TestSoftmaxCE:
    def test_symmetric_logits(self):
        loss, grad = softmax_ce(np.array([0.0, 0.0]), 0)
        assert loss == pytest.approx(np.log(2), abs=1e-15)
        np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)

    def test_saturation_is_stable(self):
        loss, grad = softmax_ce(np.array([1000.0, 0.0]), 0)
        assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(grad))
        loss, _ = softmax_ce(np.array([1000.0, 0.0]), 1)
        assert loss == pytest.approx(1000.0)

    def test_gradient_sums_to_zero(self, rng):
        _, grad = softmax_ce(rng.standard_normal((6, 4)) * 10, rng.integers(0, 4, 6))
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_finite_differences(self, rng):
        for _ in range(5):
            z, y = rng.standard_normal((4, 3)), rng.integers(0, 3, 4)
            _, g = softmax_ce(z, y)
            assert rel_err(g, fd_grad(lambda v: softmax_ce(v, y)[0], z, h=1e-6)) < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_ce(np.zeros(3), 3)
        with pytest.raises(ValueError):
            softmax_ce(np.zeros((2, 3)), [0])

    def test_softmax_rows_sum_to_one(self, rng):
        np.testing.assert_allclose(softmax(rng.standard_normal((5, 7)) * 50).sum(axis=1), 1.0)
