"""Tensor engine: op semantics and reverse-mode gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import slaterl.nnkernel as nk
from slaterl.nnkernel import Tensor


def numeric_grad(fn, arr, step=1e-5):
    """Independent central-difference oracle: d fn / d arr, coordinate-wise.

    ``fn`` takes the ndarray and returns a python float; it must not mutate
    its argument.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(arr)
        flat[i] = orig - step
        down = fn(arr)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def assert_grad_matches(build_loss, arr, rtol=1e-6, step=1e-5):
    x = Tensor(arr.copy(), requires_grad=True)
    loss = build_loss(x)
    loss.backward()
    expected = numeric_grad(lambda a: build_loss(Tensor(a)).item(), arr.copy(), step)
    np.testing.assert_allclose(x.grad, expected, rtol=rtol, atol=1e-8)


class TestBasicOps:
    def test_square_gradient_at_three(self):
        # dx(x*x) at x=3 must be exactly 6
        x = Tensor(np.array(3.0), requires_grad=True)
        loss = nk.mul(x, x)
        loss.backward()
        assert x.grad == pytest.approx(6.0, abs=1e-12)

    def test_bce_gradient_at_zero_logit(self):
        # d/dlogit of -log sigmoid(logit) at 0 with label 1 is sigma(0)-1 = -0.5
        logit = Tensor(np.array(0.0), requires_grad=True)
        loss = nk.neg(nk.log(nk.sigmoid(logit)))
        loss.backward()
        assert logit.grad == pytest.approx(-0.5, abs=1e-12)

    def test_add_broadcast_bias(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        b = rng.normal(size=(3,))
        bias = Tensor(b.copy(), requires_grad=True)
        loss = nk.add(Tensor(x), bias).sum()
        loss.backward()
        np.testing.assert_allclose(bias.grad, np.full(3, 4.0))

    def test_matmul_gradients(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        assert_grad_matches(lambda t: nk.matmul(t, Tensor(w)).sum(), a)
        assert_grad_matches(lambda t: nk.matmul(Tensor(a), t).sum(), w)

    def test_matmul_batched_gradients(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 2, 3, 4))
        b = rng.normal(size=(2, 2, 4, 3))
        weights = rng.normal(size=(2, 2, 3, 3))

        def loss(t):
            return nk.mul(nk.matmul(t, Tensor(b)), Tensor(weights)).sum()

        assert_grad_matches(loss, a)

    def test_reduction_and_shape_ops(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 5))
        assert_grad_matches(lambda t: nk.tmean(t, axis=1).sum(), a)
        assert_grad_matches(lambda t: nk.narrow(t, 1, 2, 2).sum(), a)
        assert_grad_matches(
            lambda t: nk.mul(nk.reshape(t, (5, 3)), Tensor(a.reshape(5, 3) + 1.0)).sum(), a
        )
        assert_grad_matches(lambda t: nk.mul(nk.swapaxes(t, 0, 1), Tensor(a.T + 2.0)).sum(), a)

    def test_concat_gradients(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        scale = Tensor(np.arange(10.0).reshape(2, 5))
        nk.mul(nk.concat([ta, tb], axis=1), scale).sum().backward()
        np.testing.assert_allclose(ta.grad, scale.values[:, :3])
        np.testing.assert_allclose(tb.grad, scale.values[:, 3:])

    def test_take_rows(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        idx = np.array([[0, 1], [2, 2], [3, 0]])
        out = nk.take_rows(x, idx)
        np.testing.assert_allclose(out.values, [[0, 1], [6, 6], [11, 8]])
        out.sum().backward()
        expected = np.zeros((3, 4))
        expected[0, 0] = expected[0, 1] = 1
        expected[1, 2] = 2  # duplicate index accumulates
        expected[2, 3] = expected[2, 0] = 1
        np.testing.assert_allclose(x.grad, expected)

    def test_embedding_scatter(self):
        table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        idx = np.array([1, 1, 3])
        nk.embedding(table, idx).sum().backward()
        expected = np.zeros((4, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_allclose(table.grad, expected)
        with pytest.raises(ValueError):
            nk.embedding(table, np.array([4]))

    def test_clip_gradient_zero_outside(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        nk.clip(x, 0.0, 1.0).sum().backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


class TestSoftmaxAndNorm:
    def test_softmax_symmetric_pair(self):
        out = nk.softmax(Tensor(np.array([0.0, 0.0])))
        np.testing.assert_allclose(out.values, [0.5, 0.5], atol=1e-15)

    def test_softmax_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 6))
        assert_grad_matches(lambda t: nk.mul(nk.softmax(t), Tensor(w)).sum(), x, rtol=1e-5)

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        assert_grad_matches(lambda t: nk.mul(nk.log_softmax(t), Tensor(w)).sum(), x, rtol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=30))
    def test_softmax_rows_normalized(self, row):
        out = nk.softmax(Tensor(np.array([row])))
        assert np.all(out.values >= 0)
        assert abs(out.values.sum() - 1.0) <= 1e-9

    def test_layer_norm_constant_vector_is_zero_before_affine(self):
        # zero variance: (x - mean) / sqrt(0 + eps) = 0 with identity affine
        gain = Tensor(np.ones(5))
        bias = Tensor(np.zeros(5))
        out = nk.layer_norm(Tensor(np.full((2, 5), 3.7)), gain, bias)
        np.testing.assert_allclose(out.values, 0.0, atol=1e-12)

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 8))
        g = rng.normal(size=(8,))
        b = rng.normal(size=(8,))
        w = rng.normal(size=(3, 8))

        def loss_x(t):
            return nk.mul(nk.layer_norm(t, Tensor(g), Tensor(b)), Tensor(w)).sum()

        assert_grad_matches(loss_x, x, rtol=1e-4)

        gain = Tensor(g.copy(), requires_grad=True)
        bias = Tensor(b.copy(), requires_grad=True)
        nk.mul(nk.layer_norm(Tensor(x), gain, bias), Tensor(w)).sum().backward()
        num_gain = numeric_grad(
            lambda a: nk.mul(nk.layer_norm(Tensor(x), Tensor(a), Tensor(b)), Tensor(w)).sum().item(),
            g.copy(),
        )
        np.testing.assert_allclose(gain.grad, num_gain, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(bias.grad, w.sum(axis=0), rtol=1e-10)


class TestBackwardContract:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            nk.mul(x, x).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        loss = nk.mul(x, x)
        loss.backward()
        loss.backward()
        assert x.grad == pytest.approx(8.0)

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        with nk.no_grad():
            out = nk.mul(x, x)
        assert not out.requires_grad
        with pytest.raises(ValueError):
            out.backward()

    def test_frozen_blocks_gradient_flow(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = Tensor(np.array(3.0), requires_grad=True)
        with nk.frozen([y]):
            loss = nk.mul(x, y)
            loss.backward()
        assert x.grad == pytest.approx(3.0)
        assert y.grad is None
        assert y.requires_grad  # restored on exit

    def test_diamond_graph_accumulation(self):
        # loss = (x + x) * x = 2x^2, dloss/dx = 4x
        x = Tensor(np.array(1.5), requires_grad=True)
        nk.mul(nk.add(x, x), x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_retain_grad_on_intermediate(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        mid = nk.mul(x, x).retain_grad()
        nk.mul(mid, Tensor(np.array(5.0))).backward()
        assert mid.grad == pytest.approx(5.0)


class TestTwoLayerMLPGradient:
    def test_mlp_matches_finite_differences(self):
        # relative error <= 1e-4 at 64-bit against the central-difference oracle
        rng = np.random.default_rng(8)
        w1 = rng.normal(size=(6, 5))
        b1 = rng.normal(size=(5,))
        w2 = rng.normal(size=(5, 1))
        x = rng.normal(size=(4, 6))

        def forward(w1_arr, b1_arr, w2_arr):
            h = nk.relu(nk.add(nk.matmul(Tensor(x), Tensor(w1_arr)), Tensor(b1_arr)))
            out = nk.matmul(h, Tensor(w2_arr))
            return nk.tmean(nk.mul(out, out))

        tw1 = Tensor(w1.copy(), requires_grad=True)
        tb1 = Tensor(b1.copy(), requires_grad=True)
        tw2 = Tensor(w2.copy(), requires_grad=True)
        h = nk.relu(nk.add(nk.matmul(Tensor(x), tw1), tb1))
        out = nk.matmul(h, tw2)
        nk.tmean(nk.mul(out, out)).backward()

        for param, arr, fn in [
            (tw1, w1, lambda a: forward(a, b1, w2).item()),
            (tb1, b1, lambda a: forward(w1, a, w2).item()),
            (tw2, w2, lambda a: forward(w1, b1, a).item()),
        ]:
            num = numeric_grad(fn, arr.copy())
            denom = np.maximum(np.abs(param.grad) + np.abs(num), 1e-3)
            assert np.max(np.abs(param.grad - num) / denom) <= 1e-4
