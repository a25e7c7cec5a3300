import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camrel.nn import (Adam, Conv2D, CyclicSGD, Flatten, InnerProduct, MaxPool2x2, Network, ReLU, Softmax,
                       binary_crossentropy, binary_crossentropy_on_head, binary_head_loss, categorical_crossentropy,
                       conv2d_backward, conv2d_forward, crossentropy_loss, gradient_check, inner_product_forward,
                       make_rng, maxpool2x2_backward, maxpool2x2_forward, quadratic_loss, relu, relu_backward, softmax,
                       triangular_lr)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar function of an array (float64)."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.fixture
def rng():
    return make_rng(1234)


class TestConvolution:
    def test_hand_computed_example(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(3, 3, 1)
        w = np.ones((2, 2, 1, 1))
        out = conv2d_forward(x, w, np.zeros(1))
        np.testing.assert_array_equal(out[..., 0], [[12, 16], [24, 28]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 7, 1)).astype(np.float32)
        out = conv2d_forward(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        np.testing.assert_array_equal(out, x)

    def test_output_shape(self, rng):
        x = rng.normal(size=(64, 64, 3)).astype(np.float32)
        w = rng.normal(size=(4, 4, 3, 32)).astype(np.float32)
        assert conv2d_forward(x, w, np.zeros(32, np.float32)).shape == (61, 61, 32)

    def test_matches_direct_loops(self, rng):
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(3, 2, 3, 4))
        b = rng.normal(size=4)
        out = conv2d_forward(x, w, b)
        ref = np.zeros((2, 4, 4, 4))
        for n in range(2):
            for i in range(4):
                for j in range(4):
                    for f in range(4):
                        ref[n, i, j, f] = np.sum(x[n, i:i + 3, j:j + 2, :] * w[..., f]) + b[f]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("bad", [
        dict(x=(5, 5, 2), w=(3, 3, 3, 1)),
        dict(x=(2, 2, 1), w=(3, 3, 1, 1)),
    ])
    def test_shape_errors(self, bad):
        with pytest.raises(ValueError):
            conv2d_forward(np.zeros(bad["x"]), np.zeros(bad["w"]), np.zeros(bad["w"][-1]))

    def test_bias_shape_error(self):
        with pytest.raises(ValueError):
            conv2d_forward(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 3)), np.zeros(2))

    def test_zero_upstream_gives_zero_gradients(self, rng):
        x = rng.normal(size=(6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        dx, dw, db = conv2d_backward(x, w, np.zeros((4, 4, 4)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_identity_kernel_backward(self, rng):
        x = rng.normal(size=(5, 5, 1))
        g = rng.normal(size=(5, 5, 1))
        dx, _, _ = conv2d_backward(x, np.ones((1, 1, 1, 1)), g)
        np.testing.assert_array_equal(dx, g)

    def test_finite_differences(self, rng):
        x = rng.normal(size=(6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        up = rng.normal(size=(4, 4, 4))
        dx, dw, db = conv2d_backward(x, w, up)
        assert rel_err(dx, numeric_grad(lambda v: np.sum(conv2d_forward(v, w, b) * up), x)) < 1e-3
        assert rel_err(dw, numeric_grad(lambda v: np.sum(conv2d_forward(x, v, b) * up), w)) < 1e-3
        assert rel_err(db, numeric_grad(lambda v: np.sum(conv2d_forward(x, w, v) * up), b)) < 1e-3

    def test_layer_chunking_matches_functional(self, rng):
        layer = Conv2D.init(3, 3, 2, 5, rng)
        layer.chunk = 3
        x = rng.normal(size=(7, 8, 8, 2)).astype(np.float32)
        y = layer.forward(x, train=True)
        np.testing.assert_allclose(y, conv2d_forward(x, layer.params["weights"], layer.params["bias"]),
                                   rtol=1e-5, atol=1e-5)
        up = rng.normal(size=y.shape).astype(np.float32)
        dx = layer.backward(up)
        rdx, rdw, rdb = conv2d_backward(x, layer.params["weights"], up)
        np.testing.assert_allclose(dx, rdx, rtol=1e-4, atol=1e-4)
        np.testing.assert_allclose(layer.grads["weights"], rdw, rtol=1e-4, atol=1e-3)
        np.testing.assert_allclose(layer.grads["bias"], rdb, rtol=1e-4, atol=1e-4)


class TestPooling:
    def test_single_window(self):
        x = np.array([[1, 2], [3, 4]], np.float32).reshape(2, 2, 1)
        assert maxpool2x2_forward(x).reshape(-1).tolist() == [4]

    def test_ceil_mode_shape(self):
        assert maxpool2x2_forward(np.zeros((61, 61, 32), np.float32)).shape == (31, 31, 32)

    def test_odd_border_keeps_truncated_window(self):
        x = np.arange(9, dtype=np.float32).reshape(3, 3, 1)
        np.testing.assert_array_equal(maxpool2x2_forward(x)[..., 0], [[4, 5], [7, 8]])

    def test_backward_finite_differences(self, rng):
        # distinct entries so the argmax is unique and the max is differentiable
        x = rng.permutation(25).astype(np.float64).reshape(5, 5, 1) / 7.0
        up = rng.normal(size=(3, 3, 1))
        dx = maxpool2x2_backward(x, up)
        num = numeric_grad(lambda v: np.sum(maxpool2x2_forward(v) * up), x, eps=1e-4)
        np.testing.assert_allclose(dx, num, atol=1e-8)
        assert np.count_nonzero(dx) == 9

    def test_ties_route_to_first_in_row_major_order(self):
        x = np.ones((2, 2, 1))
        dx = maxpool2x2_backward(x, np.array([[[5.0]]]))
        np.testing.assert_array_equal(dx[..., 0], [[5, 0], [0, 0]])


class TestActivations:
    def test_relu_values(self):
        assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]

    def test_relu_all_negative(self, rng):
        x = -np.abs(rng.normal(size=(4, 5))) - 0.1
        assert not relu(x).any()
        assert not relu_backward(x, np.ones_like(x)).any()

    def test_relu_finite_differences(self, rng):
        x = rng.normal(size=(4, 6))
        x[np.abs(x) < 1e-4] = 0.5
        up = rng.normal(size=x.shape)
        num = numeric_grad(lambda v: np.sum(relu(v) * up), x, eps=1e-6)
        np.testing.assert_allclose(relu_backward(x, up), num, atol=1e-7)

    def test_inner_product_examples(self):
        np.testing.assert_array_equal(inner_product_forward(np.array([1.0, 2.0]), np.eye(2), np.array([10.0, 20.0])),
                                      [11, 22])
        x = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(inner_product_forward(x, np.eye(3), np.zeros(3)), x)

    def test_inner_product_finite_differences(self, rng):
        layer = InnerProduct(rng.normal(size=(18, 64)), rng.normal(size=64))
        x = rng.normal(size=(3, 18))
        up = rng.normal(size=(3, 64))
        layer.forward(x, train=True)
        dx = layer.backward(up)

        def f_w(w):
            return np.sum(inner_product_forward(x, w, layer.params["bias"]) * up)
        assert rel_err(dx, numeric_grad(lambda v: np.sum(inner_product_forward(v, layer.params["weights"],
                                                                               layer.params["bias"]) * up), x)) < 1e-3
        assert rel_err(layer.grads["weights"], numeric_grad(f_w, layer.params["weights"])) < 1e-3

    def test_inner_product_mismatch(self):
        with pytest.raises(ValueError):
            inner_product_forward(np.zeros(3), np.zeros((4, 2)), np.zeros(2))

    def test_softmax_examples(self):
        np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
        with np.errstate(over="raise"):
            np.testing.assert_array_equal(softmax(np.array([1000.0, 0.0])), [1.0, 0.0])

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-500, 500)))
    @settings(max_examples=100, deadline=None)
    def test_softmax_sums_to_one(self, x):
        p = softmax(x)
        assert abs(p.sum() - 1) < 1e-6
        assert (p >= 0).all()

    def test_softmax_backward_finite_differences(self, rng):
        x = rng.normal(size=(2, 5))
        up = rng.normal(size=(2, 5))
        layer = Softmax()
        layer.forward(x, train=True)
        num = numeric_grad(lambda v: np.sum(softmax(v) * up), x)
        assert rel_err(layer.backward(up), num) < 1e-3

    def test_flatten_is_row_major_hwc(self):
        x = np.arange(12).reshape(1, 2, 3, 2)
        assert Flatten().forward(x)[0].tolist() == list(range(12))


class TestLosses:
    def test_crossentropy_examples(self):
        loss, _ = categorical_crossentropy(np.array([0.0, 1.0, 0.0]), 1)
        assert loss == 0.0
        loss, _ = categorical_crossentropy(np.array([0.5, 0.5]), 0)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_crossentropy_logit_gradient(self, rng):
        z = rng.normal(size=(4, 5))
        t = np.array([0, 3, 1, 4])
        _, g = categorical_crossentropy(softmax(z), t)
        num = numeric_grad(lambda v: categorical_crossentropy(softmax(v), t)[0], z)
        assert rel_err(g, num) < 1e-3

    def test_crossentropy_rejects_bad_target(self):
        with pytest.raises(ValueError):
            categorical_crossentropy(np.array([0.5, 0.5]), 2)

    def test_binary_examples(self):
        assert binary_crossentropy(1.0, 1)[0] == 0.0
        for t in (0, 1):
            assert binary_crossentropy(0.5, t)[0] == pytest.approx(math.log(2), abs=1e-12)
        assert binary_crossentropy(0.9, 0)[0] == pytest.approx(-math.log(0.1), abs=1e-12)
        assert binary_crossentropy(0.9, 0)[0] == pytest.approx(2.3026, abs=1e-4)

    def test_binary_gradient(self, rng):
        s = rng.uniform(0.05, 0.95, size=6)
        t = np.array([0, 1, 1, 0, 1, 0])
        _, g = binary_crossentropy(s, t)
        assert rel_err(g, numeric_grad(lambda v: binary_crossentropy(v, t)[0], s)) < 1e-3

    def test_binary_head_logit_gradient(self, rng):
        z = rng.normal(size=(5, 2))
        t = np.array([1, 0, 0, 1, 1])
        _, g = binary_crossentropy_on_head(softmax(z), t)
        num = numeric_grad(lambda v: binary_crossentropy(softmax(v)[:, 0], t)[0], z)
        assert rel_err(g, num) < 1e-3


def _small_net(rng, dtype=np.float64):
    layers = [
        Conv2D.init(3, 3, 2, 3, rng, name="c1"), MaxPool2x2(name="p1"),
        Conv2D.init(2, 2, 3, 4, rng, name="c2"), ReLU(name="r1"), Flatten(name="f"),
        InnerProduct.init(36, 5, rng, name="ip1"), ReLU(name="r2"), InnerProduct.init(5, 2, rng, name="ip2"),
        Softmax(name="sm"),
    ]
    return Network(layers, input_shape=(9, 9, 2)).astype(dtype)


class TestOptimizers:
    def _scalar_net(self, value=0.0):
        layer = InnerProduct(np.array([[value]]), np.zeros(1))
        return Network([layer]), layer

    def test_adam_first_step(self):
        net, layer = self._scalar_net()
        layer.grads = {"weights": np.array([[1.0]]), "bias": np.zeros(1)}
        Adam().step(net)
        assert abs(layer.params["weights"][0, 0] - (-0.001)) < 1e-9

    def test_adam_zero_gradient_is_noop(self, rng):
        net = _small_net(rng)
        before = net.get_weights()
        for layer in net.param_layers():
            layer.zero_grad()
        Adam().step(net)
        for a, b in zip(before, net.get_weights()):
            np.testing.assert_array_equal(a, b)

    def test_frozen_layer_untouched(self, rng):
        net = _small_net(rng)
        net["c1"].frozen = True
        before = net["c1"].params["weights"].copy()
        for layer in net.param_layers():
            layer.grads = {k: np.ones_like(v) for k, v in layer.params.items()}
        for opt in (Adam(), CyclicSGD()):
            opt.step(net)
        np.testing.assert_array_equal(net["c1"].params["weights"], before)

    def test_triangular_anchor_points(self):
        assert triangular_lr(0, 5e-5, 15e-5, 100) == 5e-5
        assert triangular_lr(100, 5e-5, 15e-5, 100) == 15e-5
        assert triangular_lr(50, 5e-5, 15e-5, 100) == pytest.approx(10e-5, abs=1e-18)
        assert triangular_lr(200, 5e-5, 15e-5, 100) == 5e-5

    @given(st.integers(0, 10_000), st.integers(1, 500))
    def test_triangular_bounds(self, t, half):
        lr = triangular_lr(t, 5e-5, 15e-5, half)
        assert 5e-5 - 1e-20 <= lr <= 15e-5 + 1e-20

    def test_cyclic_sgd_records_trace(self, rng):
        net, layer = self._scalar_net()
        opt = CyclicSGD(half_cycle_steps=4)
        for _ in range(9):
            layer.grads = {"weights": np.array([[1.0]]), "bias": np.zeros(1)}
            opt.step(net)
        assert opt.trace[0] == 5e-5 and opt.trace[4] == 15e-5 and opt.trace[8] == 5e-5
        assert layer.params["weights"][0, 0] == pytest.approx(-sum(opt.trace), rel=1e-12)


class TestGradientCheck:
    def test_linear_network(self, rng):
        net = Network([InnerProduct(rng.normal(size=(2, 2)), rng.normal(size=2))])
        x = rng.normal(size=(3, 2))
        report = gradient_check(net, x, quadratic_loss(rng.normal(size=(3, 2))), epsilon=1e-4, tolerance=1e-6)
        assert report.passed and report.max_error < 1e-6

    def test_every_layer_kind(self, rng):
        net = _small_net(rng)
        x = rng.normal(size=(2, 9, 9, 2))
        report = gradient_check(net, x, crossentropy_loss([0, 1]), epsilon=1e-5)
        assert set(report.errors) == {"c1", "c2", "ip1", "ip2"}
        assert report.max_error < 1e-3

    def test_binary_head(self, rng):
        net = _small_net(rng)
        report = gradient_check(net, rng.normal(size=(3, 9, 9, 2)), binary_head_loss([1, 0, 1]), epsilon=1e-5)
        assert report.max_error < 1e-3

    def test_all_frozen_gives_empty_report(self, rng):
        net = _small_net(rng)
        for layer in net.param_layers():
            layer.frozen = True
        report = gradient_check(net, rng.normal(size=(1, 9, 9, 2)), crossentropy_loss([0]))
        assert report.errors == {} and report.passed

    def test_detects_wrong_gradient(self, rng):
        net = _small_net(rng)

        def broken(p):
            value, g = crossentropy_loss([1])(p)
            return value, g * 1.5
        report = gradient_check(net, rng.normal(size=(1, 9, 9, 2)), broken, epsilon=1e-5)
        assert not report.passed


class TestNetwork:
    def test_predict_equals_single_sample(self, rng):
        net = _small_net(rng, np.float32)
        x = rng.normal(size=(6, 9, 9, 2)).astype(np.float32)
        batch = net.predict(x)
        for i in range(6):
            np.testing.assert_array_equal(batch[i], net.predict_one(x[i]))

    def test_logits_skip_softmax(self, rng):
        net = _small_net(rng)
        x = rng.normal(size=(2, 9, 9, 2))
        np.testing.assert_allclose(softmax(net.forward(x, logits=True)), net.forward(x), rtol=1e-12)

    def test_shape_chain(self, rng):
        chain = _small_net(rng).shape_chain()
        assert chain[0] == (7, 7, 3) and chain[1] == (4, 4, 3) and chain[-1] == (2,)

    def test_get_set_weights_roundtrip(self, rng):
        a, b = _small_net(rng), _small_net(make_rng(99))
        b.set_weights(a.get_weights())
        x = rng.normal(size=(2, 9, 9, 2))
        np.testing.assert_array_equal(a.forward(x), b.forward(x))

    def test_make_rng_streams(self):
        assert make_rng(5, 1).random() == make_rng(5, 1).random()
        assert make_rng(5, 1).random() != make_rng(5, 2).random()
