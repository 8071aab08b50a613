import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harpipe import ndtensor as nd
from harpipe.errors import ConfigurationError, DataError, DimensionError


def conv_oracle(x, kernels, bias):
    """Triple-loop reference convolution."""
    time, channels = x.shape
    filters, width, _ = kernels.shape
    out = np.zeros((time - width + 1, filters))
    for t in range(time - width + 1):
        for f in range(filters):
            acc = bias[f]
            for w in range(width):
                for c in range(channels):
                    acc += x[t + w, c] * kernels[f, w, c]
            out[t, f] = acc
    return out


class TestConv1d:
    def test_tpn_first_layer_shape(self):
        rng = np.random.default_rng(0)
        out = nd.conv1d_forward(rng.normal(size=(400, 3)),
                                rng.normal(size=(32, 24, 3)),
                                np.zeros(32))
        assert out.shape == (377, 32)

    def test_zero_input_gives_zero_output(self):
        rng = np.random.default_rng(1)
        out = nd.conv1d_forward(np.zeros((20, 3)), rng.normal(size=(4, 5, 3)), np.zeros(4))
        assert np.all(out == 0.0)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(10, 2))
        k = rng.normal(size=(1, 3, 2))
        b = rng.normal(size=1)
        assert np.allclose(nd.conv1d_forward(x, k, b), conv_oracle(x, k, b), atol=1e-12)

    def test_random_shapes_match_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            time = int(rng.integers(2, 33))
            width = int(rng.integers(1, time + 1))
            channels = int(rng.integers(1, 4))
            filters = int(rng.integers(1, 6))
            x = rng.normal(size=(time, channels))
            k = rng.normal(size=(filters, width, channels))
            b = rng.normal(size=filters)
            assert np.allclose(nd.conv1d_forward(x, k, b), conv_oracle(x, k, b), atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(DimensionError, match="channel"):
            nd.conv1d_forward(np.zeros((10, 2)), np.zeros((3, 4, 5)), np.zeros(3))

    def test_short_time_axis_raises(self):
        with pytest.raises(DimensionError, match="time"):
            nd.conv1d_forward(np.zeros((3, 2)), np.zeros((1, 5, 2)), np.zeros(1))

    def test_backward_zero_upstream(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(12, 2))
        k = rng.normal(size=(2, 3, 2))
        g = nd.conv1d_backward(x, k, np.zeros((10, 2)))
        assert np.all(g.param_grads["W"] == 0.0)
        assert np.all(g.param_grads["b"] == 0.0)
        assert np.all(g.input_grad == 0.0)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(12, 2))
        k = rng.normal(size=(2, 3, 2))
        b = rng.normal(size=2)
        up = rng.normal(size=(10, 2))
        g = nd.conv1d_backward(x, k, up)
        h = 1e-5

        def loss(xv, kv, bv):
            return float((nd.conv1d_forward(xv, kv, bv) * up).sum())

        for arr, grad in ((k, g.param_grads["W"]), (x, g.input_grad)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = loss(x, k, b)
                flat[i] = orig - h
                minus = loss(x, k, b)
                flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                assert abs(gflat[i] - numeric) / max(abs(numeric), 1e-6) < 1e-6

    def test_full_width_kernel_gradient_is_scaled_input(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 2))
        k = rng.normal(size=(1, 5, 2))
        up = np.array([[2.5]])
        g = nd.conv1d_backward(x, k, up)
        assert np.allclose(g.param_grads["W"][0], 2.5 * x)

    def test_backward_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            nd.conv1d_backward(np.zeros((12, 2)), np.zeros((2, 3, 2)), np.zeros((9, 2)))


class TestDense:
    def test_identity_weights(self):
        x = np.array([1.0, -2.0, 3.0])
        out = nd.dense_forward(x, np.eye(3), np.zeros(3))
        assert np.allclose(out, x)

    def test_har_head_shape(self):
        rng = np.random.default_rng(7)
        out = nd.dense_forward(rng.normal(size=96), rng.normal(size=(1024, 96)),
                               np.zeros(1024))
        assert out.shape == (1024,)

    def test_matches_dot_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        expected = np.array([sum(w[i, j] * x[j] for j in range(5)) + b[i] for i in range(3)])
        assert np.allclose(nd.dense_forward(x, w, b), expected, atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            nd.dense_forward(np.zeros(4), np.zeros((3, 5)), np.zeros(3))

    def test_backward_zero_upstream(self):
        g = nd.dense_backward(np.ones(5), np.ones((3, 5)), np.zeros(3))
        assert np.all(g.param_grads["W"] == 0.0)
        assert np.all(g.input_grad == 0.0)

    def test_backward_bias_grad_equals_upstream(self):
        rng = np.random.default_rng(9)
        up = rng.normal(size=3)
        g = nd.dense_backward(rng.normal(size=5), rng.normal(size=(3, 5)), up)
        assert np.array_equal(g.param_grads["b"], up)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        up = rng.normal(size=3)
        g = nd.dense_backward(x, w, up)
        h = 1e-5
        flat = w.reshape(-1)
        gflat = g.param_grads["W"].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float((nd.dense_forward(x, w, np.zeros(3)) * up).sum())
            flat[i] = orig - h
            minus = float((nd.dense_forward(x, w, np.zeros(3)) * up).sum())
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            assert abs(gflat[i] - numeric) / max(abs(numeric), 1e-6) < 1e-6


class TestActivations:
    def test_softmax_uniform(self):
        assert np.allclose(nd.softmax(np.zeros(3)), np.full(3, 1 / 3))

    def test_sigmoid_at_zero(self):
        assert nd.sigmoid(np.array(0.0)) == 0.5

    def test_softmax_matches_exp_normalize(self):
        rng = np.random.default_rng(11)
        v = rng.normal(size=6)
        expected = np.exp(v) / np.exp(v).sum()
        assert np.allclose(nd.softmax(v), expected, atol=1e-12)

    def test_softmax_empty_raises(self):
        with pytest.raises(DimensionError):
            nd.softmax(np.zeros(0))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_softmax_sums_to_one_and_shift_invariant(self, logits):
        v = np.array(logits)
        out = nd.softmax(v)
        assert abs(out.sum() - 1.0) <= 1e-9
        assert np.all(out > 0)
        shifted = nd.softmax(v + 3.7)
        assert np.allclose(out, shifted, atol=1e-9)

    def test_relu_backward_masks_negative(self):
        x = np.array([-1.0, 0.0, 2.0])
        up = np.ones(3)
        assert np.array_equal(nd.relu_backward(x, up), [0.0, 0.0, 1.0])


class TestPooling:
    def test_constant_input_ties_to_lowest_index(self):
        vals, idx = nd.global_max_pool(np.ones((5, 4)))
        assert np.all(vals == 1.0)
        assert np.all(idx == 0)

    def test_tpn_pool_shape(self):
        rng = np.random.default_rng(12)
        vals, idx = nd.global_max_pool(rng.normal(size=(355, 96)))
        assert vals.shape == (96,)
        assert idx.shape == (96,)

    def test_matches_column_scan_oracle(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(17, 5))
        vals, idx = nd.global_max_pool(x)
        for f in range(5):
            best, best_i = x[0, f], 0
            for t in range(17):
                if x[t, f] > best:
                    best, best_i = x[t, f], t
            assert vals[f] == best
            assert idx[f] == best_i

    def test_backward_routes_to_argmax(self):
        x = np.array([[0.0, 5.0], [3.0, 1.0]])
        vals, idx = nd.global_max_pool(x)
        up = np.array([1.0, 2.0])
        grad = nd.global_max_pool_backward(idx, up, 2)
        assert np.array_equal(grad, [[0.0, 2.0], [1.0, 0.0]])


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out, mask = nd.dropout(x, 0.0, np.random.default_rng(0), training=True)
        assert np.array_equal(out, x)
        assert mask is None

    def test_eval_mode_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out, mask = nd.dropout(x, 0.9, np.random.default_rng(0), training=False)
        assert np.array_equal(out, x)
        assert mask is None

    def test_zeroed_fraction_near_rate(self):
        rng = np.random.default_rng(14)
        out, _ = nd.dropout(np.ones(10 ** 6), 0.1, rng, training=True)
        zeroed = float((out == 0.0).mean())
        assert abs(zeroed - 0.1) < 0.002

    def test_survivors_scaled(self):
        rng = np.random.default_rng(15)
        out, _ = nd.dropout(np.ones(1000), 0.2, rng, training=True)
        survivors = out[out != 0.0]
        assert np.allclose(survivors, 1.0 / 0.8)

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigurationError):
            nd.dropout(np.ones(3), 1.0, np.random.default_rng(0))


class TestLosses:
    def test_cce_perfect_one_hot(self):
        p = np.array([0.0, 1.0, 0.0])
        assert nd.categorical_cross_entropy(p, p) == pytest.approx(0.0, abs=1e-10)

    def test_cce_uniform_against_one_hot(self):
        p = np.full(6, 1 / 6)
        t = np.zeros(6)
        t[2] = 1.0
        assert nd.categorical_cross_entropy(p, t) == pytest.approx(np.log(6), abs=1e-12)

    def test_cce_soft_pair_matches_sum_oracle(self):
        rng = np.random.default_rng(16)
        p = rng.dirichlet(np.ones(5))
        t = rng.dirichlet(np.ones(5))
        expected = -sum(t[i] * np.log(max(p[i], 1e-12)) for i in range(5))
        assert nd.categorical_cross_entropy(p, t) == pytest.approx(expected, abs=1e-12)

    def test_cce_length_mismatch_raises(self):
        with pytest.raises(DimensionError):
            nd.categorical_cross_entropy(np.full(3, 1 / 3), np.full(4, 0.25))

    def test_cce_non_distribution_raises(self):
        with pytest.raises(DataError):
            nd.categorical_cross_entropy(np.array([0.5, 0.9]), np.array([1.0, 0.0]))

    def test_bce_values(self):
        assert nd.binary_cross_entropy(0.5, 1) == pytest.approx(np.log(2))
        assert nd.binary_cross_entropy(1 - 1e-12, 1) == pytest.approx(0.0, abs=1e-9)
        rng = np.random.default_rng(17)
        p = float(rng.uniform(0.01, 0.99))
        assert nd.binary_cross_entropy(p, 0) == pytest.approx(-np.log(1 - p))

    def test_l2_penalty(self):
        params = nd.ParameterSet(tensors={"a/W": np.array([[2.0]]), "a/b": np.array([5.0])})
        cfg = nd.RegularizationConfig(l2_factor=0.0001)
        value, grads = nd.l2_penalty(params, cfg)
        assert value == pytest.approx(0.0004)
        assert np.allclose(grads["a/W"], [[0.0004]])
        assert "a/b" not in grads  # biases excluded

    def test_l2_zero_weights(self):
        params = nd.ParameterSet(tensors={"a/W": np.zeros((3, 3))})
        value, _ = nd.l2_penalty(params, nd.RegularizationConfig())
        assert value == 0.0

    def test_l2_random_matches_oracle(self):
        rng = np.random.default_rng(18)
        w = rng.normal(size=(4, 5))
        params = nd.ParameterSet(tensors={"x/W": w})
        value, grads = nd.l2_penalty(params, nd.RegularizationConfig(l2_factor=0.01))
        assert value == pytest.approx(0.01 * (w ** 2).sum())
        assert np.allclose(grads["x/W"], 0.02 * w)

    def test_l2_frozen_layer_has_no_gradient(self):
        params = nd.ParameterSet(tensors={"a/W": np.ones((2, 2)), "b/W": np.ones((2, 2))},
                                 frozen={"a"})
        value, grads = nd.l2_penalty(params, nd.RegularizationConfig(l2_factor=0.1))
        assert value == pytest.approx(0.1 * 8.0)  # value still covers all weights
        assert set(grads) == {"b/W"}


class TestAdam:
    def _params(self, value):
        return nd.ParameterSet(tensors={"w/W": np.array([value])})

    def test_zero_gradient_leaves_params_unchanged(self):
        params = self._params(1.5)
        state = nd.AdamState.for_params(params)
        nd.adam_step(params, {"w/W": np.zeros(1)}, state)
        assert params.tensors["w/W"][0] == 1.5
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        params = self._params(0.0)
        state = nd.AdamState.for_params(params)
        nd.adam_step(params, {"w/W": np.ones(1)}, state)
        # closed form: bias-corrected m_hat = 1, v_hat = 1 -> step = -lr / (1 + eps)
        assert params.tensors["w/W"][0] == pytest.approx(-0.0003, rel=1e-6)

    def test_frozen_layer_bitwise_unchanged(self):
        params = nd.ParameterSet(tensors={"w/W": np.array([1.0, 2.0])}, frozen={"w"})
        before = params.tensors["w/W"].copy()
        state = nd.AdamState.for_params(params)
        for _ in range(5):
            nd.adam_step(params, {"w/W": np.ones(2)}, state)
        assert np.array_equal(params.tensors["w/W"], before)

    def test_gradient_shape_mismatch_raises(self):
        params = self._params(0.0)
        state = nd.AdamState.for_params(params)
        with pytest.raises(DimensionError):
            nd.adam_step(params, {"w/W": np.zeros(2)}, state)


class TestFiniteDifferenceCheck:
    def test_quadratic_loss(self):
        params = nd.ParameterSet(tensors={"w/W": np.array([1.0, -2.0, 0.5])})

        def loss_and_grads(p):
            w = p.tensors["w/W"]
            return float((w ** 2).sum()), {"w/W": 2.0 * w}

        err = nd.finite_difference_check(loss_and_grads, params)
        assert err < 1e-8

    def test_zero_loss_configuration(self):
        params = nd.ParameterSet(tensors={"w/W": np.zeros(3)})

        def loss_and_grads(p):
            w = p.tensors["w/W"]
            return float((w ** 2).sum()), {"w/W": 2.0 * w}

        err = nd.finite_difference_check(loss_and_grads, params)
        assert err < 1e-4
