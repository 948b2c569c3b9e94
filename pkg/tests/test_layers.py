import itertools

import numpy as np
import pytest

from pergrad import layers
from pergrad.checks import finite_difference_check
from pergrad.layers import (
    CompositionError,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    aggregate_backward,
    backward_input,
    conv_per_example_grad,
    dense_per_example_grad,
    forward,
    input_grad,
    per_example_backward,
    per_example_loss,
)
from pergrad.reference import conv_weight_grad_loop, dense_weight_grad_loop
from pergrad.tensor_core import ConvGeometry, InvalidGeometryError, conv_nd

from conftest import two_conv_net


def arr(values):
    return np.asarray(values, dtype=np.float64)


def conv_layer(weight, bias=None, **kw):
    weight = arr(weight)
    g = ConvGeometry(weight.shape[1] * kw.get("groups", 1), weight.shape[0], weight.shape[2:], **kw)
    return Conv(weight, None if bias is None else arr(bias), g)


class TestForward:
    def test_identity_kernel(self):
        net = Network((conv_layer([[[1.0]]]),))
        x = np.random.default_rng(0).standard_normal((3, 1, 6))
        out, _ = forward(net, x)
        np.testing.assert_array_equal(out, x)

    def test_relu_on_negative_input(self):
        net = Network((conv_layer([[[1.0]]]), ReLU()))
        out, _ = forward(net, -np.ones((2, 1, 4)))
        assert not out.any()

    def test_matches_hand_composition(self, toy_net, toy_batch):
        c1, _, c2, _, pool, _, dense = toy_net.layers
        y = np.maximum(conv_nd(toy_batch, c1.weight) + c1.bias[:, None, None], 0)
        y = np.maximum(conv_nd(y, c2.weight) + c2.bias[:, None, None], 0)
        # 2x2/2 pooling drops the trailing odd row and column
        B, C, H, W = y.shape
        y = y[:, :, : H // 2 * 2, : W // 2 * 2]
        y = y.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))
        expected = y.reshape(B, -1) @ dense.weight.T + dense.bias
        out, cache = forward(toy_net, toy_batch)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
        assert len(cache.inputs) == len(toy_net.layers)
        assert cache.batch_size == 4

    def test_shape_error_names_layer(self, toy_net):
        with pytest.raises(CompositionError, match="layer 0"):
            forward(toy_net, np.zeros((1, 3, 10, 10)))

    def test_mismatched_dense_names_layer(self):
        rng = np.random.default_rng(0)
        net = Network((Flatten(), Dense.init(rng, 5, 2)))
        with pytest.raises(CompositionError, match="layer 1"):
            forward(net, np.zeros((1, 1, 4)))

    def test_network_needs_parameters(self):
        with pytest.raises(ValueError):
            Network((ReLU(), Flatten()))


class TestLoss:
    def test_zero_row(self):
        assert per_example_loss(np.zeros((2, 3))).tolist() == [0.0, 0.0]

    def test_three_four(self):
        assert per_example_loss(arr([[3, 4]]))[0] == 12.5

    def test_gradient_is_output(self):
        out = np.random.default_rng(0).standard_normal((3, 4))
        assert layers.loss_grad(out) is out


class TestBackwardInput:
    def test_identity_conv(self):
        layer = conv_layer([[[1.0]]])
        dy = np.random.default_rng(0).standard_normal((2, 1, 5))
        np.testing.assert_array_equal(backward_input(layer, np.zeros((2, 1, 5)), dy), dy)

    def test_dense_scalar(self):
        layer = Dense(arr([[2.0]]), None)
        dy = arr([[1.5], [-1.0]])
        np.testing.assert_array_equal(backward_input(layer, np.zeros((2, 1)), dy), 2 * dy)

    def test_shape_mismatch(self):
        layer = Dense(arr([[2.0]]), None)
        with pytest.raises(ValueError):
            backward_input(layer, np.zeros((2, 1)), np.zeros((3, 1)))

    @pytest.mark.parametrize("stride,dilation,padding,groups", [
        (1, 1, 0, 1), (2, 1, 1, 2), (3, 2, 2, 4), (2, 2, 0, 1), (1, 1, 2, 4),
    ])
    def test_conv_input_grad_finite_differences(self, stride, dilation, padding, groups):
        net = two_conv_net(seed=5, spatial=(13,), stride=stride, dilation=dilation, padding=padding,
                           groups=groups, pool=False)
        x = np.random.default_rng(1).standard_normal((2, 4, 13))
        out, cache = forward(net, x)
        dx = input_grad(net, cache, out)
        rng = np.random.default_rng(2)
        for _ in range(10):
            idx = tuple(int(rng.integers(s)) for s in x.shape)
            step = np.zeros_like(x)
            step[idx] = 1e-6
            lp = per_example_loss(forward(net, x + step)[0])[idx[0]]
            lm = per_example_loss(forward(net, x - step)[0])[idx[0]]
            fd = (lp - lm) / 2e-6
            assert abs(fd - dx[idx]) <= max(1e-8, 1e-5 * abs(fd))

    def test_maxpool_ties_go_to_lowest_index(self):
        pool = MaxPool(2, 2)
        x = np.ones((1, 1, 2, 2))
        y, arg = pool.forward(x)
        dx = pool.backward_input(x, arg, np.ones_like(y))
        np.testing.assert_array_equal(dx, [[[[1, 0], [0, 0]]]])

    def test_overlapping_maxpool_accumulates(self):
        pool = MaxPool(3, 1)
        x = arr([[[0, 1, 5, 2, 0]]])
        y, arg = pool.forward(x)
        np.testing.assert_array_equal(y, [[[5, 5, 5]]])
        np.testing.assert_array_equal(pool.backward_input(x, arg, np.ones_like(y)), [[[0, 0, 3, 0, 0]]])

    def test_relu_mask(self):
        x = arr([[-1, 2, 0, 3]])
        np.testing.assert_array_equal(ReLU().backward_input(x, None, np.ones((1, 4))), [[0, 1, 0, 1]])


class TestDensePerExample:
    def test_hand_outer(self):
        np.testing.assert_array_equal(dense_per_example_grad(arr([[1, 2]]), arr([[3]])), [[[3, 6]]])

    def test_zero_dy(self):
        assert not dense_per_example_grad(np.ones((3, 4)), np.zeros((3, 2))).any()

    def test_against_loops_and_aggregate(self):
        rng = np.random.default_rng(0)
        x, dy = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
        per = dense_per_example_grad(x, dy)
        np.testing.assert_allclose(per, dense_weight_grad_loop(x, dy), rtol=0, atol=1e-14)
        layer = Dense(rng.standard_normal((3, 4)), None)
        np.testing.assert_allclose(per.sum(axis=0), layer.aggregate_grads(x, dy)["weight"], atol=1e-12)

    def test_batch_mismatch(self):
        with pytest.raises(ValueError):
            dense_per_example_grad(np.ones((2, 4)), np.ones((3, 2)))


SWEEP = list(itertools.product((1, 2), (1, 2, 3), (1, 2), (0, 1, 2), (1, 2, 4)))


class TestConvPerExample:
    def test_hand_value(self):
        g = ConvGeometry(1, 1, (2,))
        np.testing.assert_array_equal(conv_per_example_grad(arr([[[1, 2, 3, 4]]]), np.ones((1, 1, 3)), g), [[[[6, 9]]]])

    def test_zero_dy(self):
        g = ConvGeometry(2, 4, (3,), stride=(2,), groups=2)
        assert not conv_per_example_grad(np.ones((3, 2, 9)), np.zeros((3, 4, 4)), g).any()

    @pytest.mark.parametrize("n,stride,dilation,padding,groups", SWEEP)
    def test_matches_batch_one_loop(self, n, stride, dilation, padding, groups):
        g = ConvGeometry(4, 8, (3,) * n, (stride,) * n, (dilation,) * n, (padding,) * n, groups)
        rng = np.random.default_rng(hash((n, stride, dilation, padding, groups)) % 2**32)
        x = rng.standard_normal((3, 4) + (11,) * n)
        dy = rng.standard_normal((3, 8, *g.output_spatial(x.shape[2:])))
        fast = conv_per_example_grad(x, dy, g)
        assert fast.shape == (3, 8, 4 // groups) + (3,) * n
        layer = Conv(np.zeros(g.kernel_shape), None, g)
        naive = np.stack([layer.aggregate_grads(x[b:b + 1], dy[b:b + 1])["weight"] for b in range(3)])
        np.testing.assert_allclose(fast, naive, rtol=0, atol=1e-10)
        np.testing.assert_allclose(fast, conv_weight_grad_loop(x, dy, g), rtol=0, atol=1e-10)

    def test_uses_one_conv_call(self, monkeypatch):
        calls = []
        real = layers.conv_nd

        def spy(x, h, *args, **kwargs):
            calls.append((x.shape, h.shape, kwargs))
            return real(x, h, *args, **kwargs)

        monkeypatch.setattr(layers, "conv_nd", spy)
        g = ConvGeometry(4, 6, (3, 3), stride=(2, 2), dilation=(1, 2), padding=(1, 0), groups=2)
        x = np.ones((5, 4, 12, 12))
        dy = np.ones((5, 6, *g.output_spatial((12, 12))))
        conv_per_example_grad(x, dy, g)
        assert len(calls) == 1
        xs, hs, kw = calls[0]
        assert xs == (1, 10, 2, 12, 12)
        assert hs == (30, 1, 1, *dy.shape[2:])
        assert kw == {"groups": 10, "padding": (0, 1, 0), "stride": (1, 1, 2), "dilation": (1, 2, 2)}

    def test_three_axis_layer_rejected(self):
        g = ConvGeometry(1, 1, (1, 1, 1))
        with pytest.raises(InvalidGeometryError):
            conv_per_example_grad(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)), g)

    def test_bias_grad_is_spatial_sum(self):
        layer = conv_layer(np.ones((2, 1, 2)), bias=[0.0, 0.0])
        dy = np.random.default_rng(0).standard_normal((3, 2, 4))
        np.testing.assert_allclose(layer.per_example_grads(np.ones((3, 1, 5)), dy)["bias"], dy.sum(axis=2))


class TestAggregateBackward:
    def test_zero_output_grad(self, toy_net, toy_batch):
        _, cache = forward(toy_net, toy_batch)
        grads = aggregate_backward(toy_net, cache, np.zeros((4, 3)))
        assert all(not g.any() for g in grads.values())
        assert list(grads) == list(toy_net.parameters())

    def test_sum_identity(self, toy_net, toy_batch):
        out, cache = forward(toy_net, toy_batch)
        per = per_example_backward(toy_net, cache, out)
        agg = aggregate_backward(toy_net, cache, out)
        for key in agg:
            assert per[key].shape == (4, *agg[key].shape)
            np.testing.assert_allclose(per[key].sum(axis=0), agg[key], rtol=0, atol=1e-9)

    def test_batch_one_exact(self, toy_net, toy_batch):
        x = toy_batch[:1]
        out, cache = forward(toy_net, x)
        per = per_example_backward(toy_net, cache, out)
        agg = aggregate_backward(toy_net, cache, out)
        for key in agg:
            np.testing.assert_allclose(per[key][0], agg[key], rtol=0, atol=1e-13)


def test_per_example_locality(toy_net, toy_batch):
    out, cache = forward(toy_net, toy_batch)
    before = per_example_backward(toy_net, cache, out)
    x = toy_batch.copy()
    x[2] = 0.0
    out, cache = forward(toy_net, x)
    after = per_example_backward(toy_net, cache, out)
    for key in before:
        for b in (0, 1, 3):
            assert before[key][b].tobytes() == after[key][b].tobytes()


@pytest.mark.parametrize("seed,spatial,stride,dilation,padding,groups", [
    (0, (10, 10), 1, 1, 0, 1),
    (1, (11, 11), 2, 1, 1, 2),
    (2, (17,), 3, 2, 2, 4),
    (3, (12, 12), 1, 2, 1, 4),
])
def test_per_example_grads_finite_differences(seed, spatial, stride, dilation, padding, groups):
    net = two_conv_net(seed, spatial, groups, stride, dilation, padding, pool=len(spatial) == 2)
    x = np.random.default_rng(seed + 10).standard_normal((3, 4, *spatial))
    out, cache = forward(net, x)
    grads = per_example_backward(net, cache, out)
    results = finite_difference_check(net, x, grads, per_layer=10, seed=seed)
    assert len(results) >= 10 * 3
    bad = [r for r in results if not r.ok]
    assert not bad, bad[:3]


def test_parameters_are_read_only(toy_net):
    for p in toy_net.parameters().values():
        with pytest.raises(ValueError):
            p[...] = 0.0


def test_with_parameters_round_trip(toy_net):
    params = {k: v + 1.0 for k, v in toy_net.parameters().items()}
    other = toy_net.with_parameters(params)
    for key, value in other.parameters().items():
        np.testing.assert_array_equal(value, params[key])
    assert other.parameters().keys() == toy_net.parameters().keys()
