import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapescale.errors import ConfigurationError, DimensionError, GradCheckError
from shapescale.tensor import (Linear, Parameter, SelfAttention, conv2d_stride2, grad_check, linear,
                               linear_backward, log_softmax, self_attention, sigmoid, softmax,
                               softmax_backward)

finite = st.floats(-50, 50, allow_nan=False)


def conv_oracle(x, k, b):
    h, w, c = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            for co in range(c):
                acc = b[co]
                for ky in range(3):
                    for kx in range(3):
                        y, xx = 2 * i + ky - 1, 2 * j + kx - 1
                        if 0 <= y < h and 0 <= xx < w:
                            for ci in range(c):
                                acc += x[y, xx, ci] * k[ky, kx, ci, co]
                out[i, j, co] = acc
    return out


def attention_oracle(x, layer):
    n, c = x.shape
    h = layer.heads
    d = c // h
    q = x @ layer.q.weight.value + layer.q.bias.value
    k = x @ layer.k.weight.value + layer.k.bias.value
    v = x @ layer.v.weight.value + layer.v.bias.value
    ctx = np.zeros((n, c))
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        for i in range(n):
            scores = [sum(q[i, sl][t] * k[j, sl][t] for t in range(d)) / np.sqrt(d) for j in range(n)]
            e = np.exp(np.array(scores) - max(scores))
            a = e / e.sum()
            for ch in range(d):
                ctx[i, head * d + ch] = sum(a[j] * v[j, head * d + ch] for j in range(n))
    return x + ctx @ layer.out.weight.value + layer.out.bias.value


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        y = linear(x, Parameter(np.eye(4)), Parameter(np.zeros(4)))
        np.testing.assert_array_equal(y, x)

    def test_zero_weight_broadcasts_bias(self, rng):
        b = np.array([1.0, -2.0, 3.0])
        y = linear(rng.normal(size=(5, 4)), Parameter(np.zeros((4, 3))), Parameter(b))
        np.testing.assert_array_equal(y, np.tile(b, (5, 1)))

    def test_matches_hand_matmul(self, rng):
        W = rng.normal(size=(3, 4))
        x = rng.normal(size=(2, 3))
        y = linear(x, Parameter(W), Parameter(np.zeros(4)))
        for i in range(2):
            for j in range(4):
                assert y[i, j] == pytest.approx(sum(x[i, k] * W[k, j] for k in range(3)), abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            linear(rng.normal(size=(2, 5)), Parameter(np.zeros((4, 3))), Parameter(np.zeros(3)))

    def test_backward_accumulates(self, rng):
        layer = Linear("l", 3, 2, rng)
        x = rng.normal(size=(4, 3))
        dy = rng.normal(size=(4, 2))
        dx = linear_backward(dy, x, layer.weight, layer.bias)
        np.testing.assert_allclose(dx, dy @ layer.weight.value.T)
        np.testing.assert_allclose(layer.weight.grad, x.T @ dy)
        linear_backward(dy, x, layer.weight, layer.bias)
        np.testing.assert_allclose(layer.bias.grad, 2 * dy.sum(axis=0))


class TestConv:
    def test_zero_kernel_gives_bias(self, rng):
        b = rng.normal(size=3)
        out = conv2d_stride2(rng.normal(size=(6, 6, 3)), Parameter(np.zeros((3, 3, 3, 3))), Parameter(b))
        np.testing.assert_array_equal(out, np.broadcast_to(b, (3, 3, 3)))

    def test_two_passes_quarter_resolution(self, rng):
        k = Parameter(rng.normal(size=(3, 3, 4, 4)) * 0.1)
        b = Parameter(np.zeros(4))
        x = rng.normal(size=(64, 64, 4))
        assert conv2d_stride2(conv2d_stride2(x, k, b), k, b).shape == (16, 16, 4)

    def test_impulse_returns_kernel_taps(self, rng):
        c = 2
        k = rng.normal(size=(3, 3, c, c))
        x = np.zeros((7, 7, c))
        x[3, 3, 0] = 1.0
        out = conv2d_stride2(x, Parameter(k), Parameter(np.zeros(c)))
        # pixel 3 is reached from output 1 via tap 2 and from output 2 via tap 0
        np.testing.assert_allclose(out[1, 1], k[2, 2, 0])
        np.testing.assert_allclose(out[2, 2], k[0, 0, 0])
        np.testing.assert_allclose(out[1, 2], k[2, 0, 0])

    @pytest.mark.parametrize("shape", [(5, 6, 2), (4, 4, 3), (7, 3, 1)])
    def test_matches_loop_oracle(self, rng, shape):
        c = shape[2]
        x = rng.normal(size=shape)
        k = rng.normal(size=(3, 3, c, c))
        b = rng.normal(size=c)
        np.testing.assert_allclose(conv2d_stride2(x, Parameter(k), Parameter(b)), conv_oracle(x, k, b),
                                   atol=1e-12)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            conv2d_stride2(np.zeros((2, 5, 1)), Parameter(np.zeros((3, 3, 1, 1))), Parameter(np.zeros(1)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(6)), np.full(6, 1 / 6))

    def test_saturated(self):
        z = np.zeros(5)
        z[2] = 1e4
        np.testing.assert_allclose(softmax(z), np.eye(5)[2], atol=1e-9)

    def test_closed_form(self):
        np.testing.assert_allclose(softmax(np.array([0.0, np.log(2.0)])), [1 / 3, 2 / 3], atol=1e-15)

    @given(arrays(float, (3, 5), elements=finite))
    def test_rows_are_distributions(self, z):
        p = softmax(z)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.log(np.maximum(p, 1e-300)), log_softmax(z), atol=1e-9,
                                   rtol=0) if np.all(p > 1e-300) else None

    @given(arrays(float, (4,), elements=finite), st.floats(-20, 20))
    def test_shift_invariant(self, z, c):
        np.testing.assert_allclose(softmax(z), softmax(z + c), atol=1e-12)

    def test_backward_matches_jacobian(self, rng):
        z = rng.normal(size=4)
        p = softmax(z)
        dp = rng.normal(size=4)
        jac = np.diag(p) - np.outer(p, p)
        np.testing.assert_allclose(softmax_backward(dp, p), jac @ dp, atol=1e-14)

    def test_sigmoid_stable(self):
        s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


class TestSelfAttention:
    def test_single_query(self, rng):
        layer = SelfAttention("a", 4, 2, rng)
        x = rng.normal(size=(1, 4))
        expected = x + (x @ layer.v.weight.value + layer.v.bias.value) @ layer.out.weight.value \
            + layer.out.bias.value
        np.testing.assert_allclose(layer(x), expected, atol=1e-12)

    def test_identical_queries_identical_outputs(self):
        c = 4
        layer = SelfAttention("a", c, 2)
        for lin in (layer.q, layer.k, layer.v, layer.out):
            lin.weight.value[:] = np.eye(c)
        x = np.tile(np.arange(c, dtype=float), (2, 1))
        y = layer(x)
        np.testing.assert_array_equal(y[0], y[1])

    def test_matches_loop_oracle(self, rng):
        layer = SelfAttention("a", 4, 2, rng)
        for lin in (layer.q, layer.k, layer.v, layer.out):
            lin.bias.value[:] = rng.normal(size=4)
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(self_attention(x, 2, layer), attention_oracle(x, layer), atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            SelfAttention("a", 6, 4)

    def test_backward(self, rng):
        layer = SelfAttention("a", 4, 2, rng)
        x = rng.normal(size=(3, 4))
        proj = rng.normal(size=(3, 4))

        def op(x):
            y, cache = layer.forward(x)
            return float(np.sum(y * proj)), [layer.backward(proj, cache)]

        assert grad_check(op, [x]) < 1e-6


class TestGradCheck:
    def test_constant(self):
        assert grad_check(lambda x: (3.0, [np.zeros_like(x)]), [np.ones(3)]) == 0.0

    def test_square(self):
        x = np.array([3.0])
        err = grad_check(lambda x: (float(x[0] ** 2), [2 * x]), [x])
        assert err < 1e-6
        assert x[0] == 3.0

    def test_linear_sum_of_squares(self, rng):
        layer = Linear("l", 3, 4, rng)
        x = rng.normal(size=(2, 3))

        def op(x, w, b):
            layer.weight.zero_grad()
            layer.bias.zero_grad()
            y = layer(x)
            dx = layer.backward(2 * y, x)
            return float(np.sum(y ** 2)), [dx, layer.weight.grad, layer.bias.grad]

        assert grad_check(op, [x, layer.weight.value, layer.bias.value], 1e-5) < 1e-4

    def test_detects_wrong_gradient(self):
        err = grad_check(lambda x: (float(np.sum(x ** 2)), [x]), [np.array([1.0, 2.0])])
        assert err > 0.1

    def test_non_finite_names_entry(self):
        # the probe x - eps leaves the log's domain only for the second entry
        with np.errstate(invalid="ignore"), pytest.raises(GradCheckError, match=r"entry \(1,\)"):
            grad_check(lambda x: (float(np.log(x).sum()), [1 / x]), [np.array([1.0, 1e-6])])
