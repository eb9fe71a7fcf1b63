"""Tensor engine tests: frozen hand oracles, backward contracts, and
finite-difference property checks over random shapes."""

import math

import numpy as np
import pytest

from tsfm_workbench import autodiff as ad
from tsfm_workbench.autodiff import DropoutRng, Tensor, grad_check
from tsfm_workbench.errors import ConfigError, GraphError, ShapeError


def _t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(_t(np.eye(2)), _t([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_product(self):
        # [[1,2],[3,4]] @ [[5],[6]]: rows 1*5+2*6 and 3*5+4*6
        out = ad.matmul(_t([[1.0, 2.0], [3.0, 4.0]]), _t([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(_t(np.zeros((2, 3))), _t(np.zeros((2, 3))))

    def test_backward_formulas(self):
        a = _t(np.arange(6.0).reshape(2, 3), grad=True)
        b = _t(np.arange(12.0).reshape(3, 4), grad=True)
        g = np.ones((2, 4))
        ad.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestConv1d:
    def test_identity_kernel(self):
        out = ad.conv1d(_t([[1.0, 1.0, 1.0, 1.0]]), _t([[[1.0]]]))
        np.testing.assert_array_equal(out.data, [[1.0, 1.0, 1.0, 1.0]])

    def test_sliding_window_sum(self):
        out = ad.conv1d(_t([[1.0, 2.0, 3.0, 4.0]]), _t([[[1.0, 1.0]]]))
        np.testing.assert_array_equal(out.data, [[3.0, 5.0, 7.0]])

    def test_kernel_longer_than_padded_input(self):
        with pytest.raises(ShapeError):
            ad.conv1d(_t(np.zeros((1, 3))), _t(np.zeros((1, 1, 6))), padding=1)

    def test_kernel_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
        k = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True, dtype=np.float64)

        def f(t):
            out = ad.conv1d(x, t[0], stride=2, padding=1)
            return (out * out).sum()

        assert grad_check(f, [k]) < 1e-4

    def test_output_length_formula(self):
        out = ad.conv1d(_t(np.zeros((1, 10))), _t(np.zeros((1, 1, 4))), stride=3, padding=2)
        assert out.shape == (1, (10 + 4 - 4) // 3 + 1)


class TestLayerNorm:
    def test_zero_variance_row(self):
        out = ad.layer_norm(_t([[5.0, 5.0, 5.0]]), _t(np.ones(3)), _t(np.zeros(3)), eps=1e-5)
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_two_point_closed_form(self):
        # mean 2, population std 1, so eps -> 0 gives exactly [-1, 1]
        out = ad.layer_norm(_t([1.0, 3.0]), _t(np.ones(2)), _t(np.zeros(2)), eps=1e-14)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_affine_collapse(self):
        out = ad.layer_norm(_t([[1.0, 2.0, 9.0]]), _t(np.zeros(3)), _t(7.0 * np.ones(3)))
        np.testing.assert_array_equal(out.data, [[7.0, 7.0, 7.0]])

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            ad.layer_norm(_t([1.0, 2.0]), _t(np.ones(2)), _t(np.zeros(2)), eps=0.0)


class TestSoftmaxAttention:
    def test_single_token_returns_value_row(self):
        rng = np.random.default_rng(1)
        q, k, v = (Tensor(rng.normal(size=(1, 4)), dtype=np.float64) for _ in range(3))
        out = ad.softmax_attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data, atol=1e-12)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(2)
        q = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)), dtype=np.float64)
        v = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        out = ad.softmax_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)

    def test_two_token_scalar_softmax_oracle(self):
        q = _t([[1.0, 0.0], [0.0, 1.0]])
        k = _t([[1.0, 0.0], [0.0, 1.0]])
        v = _t([[2.0, 0.0], [0.0, 4.0]])
        scale = 1.0 / math.sqrt(2.0)
        expected = np.zeros((2, 2))
        for i in range(2):
            logits = [scale * float(q.data[i] @ k.data[j]) for j in range(2)]
            z = [math.exp(l - max(logits)) for l in logits]
            w = [zi / sum(z) for zi in z]
            expected[i] = w[0] * v.data[0] + w[1] * v.data[1]
        out = ad.softmax_attention(q, k, v)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        # V = I makes the output the weight matrix itself.
        rng = np.random.default_rng(3)
        q = Tensor(5.0 * rng.normal(size=(6, 6)), dtype=np.float64)
        k = Tensor(5.0 * rng.normal(size=(6, 6)), dtype=np.float64)
        weights = ad.softmax_attention(q, k, Tensor(np.eye(6), dtype=np.float64))
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones(6), atol=1e-6)


class TestElementwise:
    def test_elu_definition(self):
        out = ad.elu(_t([0.0, -20.0, 2.0]))
        assert out.data[0] == 0.0
        assert abs(out.data[1] - (-1.0)) < 1e-8
        assert out.data[2] == 2.0

    def test_gelu_known_points(self):
        out = ad.gelu(_t([0.0, 100.0]))
        assert out.data[0] == 0.0
        np.testing.assert_allclose(out.data[1], 100.0)

    def test_fft_magnitude_pure_cosine(self):
        t = 32
        cycles = 5
        x = np.cos(2.0 * np.pi * cycles * np.arange(t) / t)
        mag = ad.fft_magnitude(_t(x)).data
        # cosine of k cycles concentrates in bins k and t-k, each of height t/2
        expected = np.zeros(t)
        expected[cycles] = t / 2.0
        expected[t - cycles] = t / 2.0
        np.testing.assert_allclose(mag, expected, atol=1e-9)
        assert mag.shape == (t,)

    def test_fft_magnitude_blocks_gradient(self):
        x = _t(np.arange(4.0), grad=True)
        assert ad.fft_magnitude(x).requires_grad is False

    def test_dropout_eval_mode_is_identity(self):
        x = _t(np.arange(6.0).reshape(2, 3), grad=True)
        out = ad.dropout(x, 0.5, rng=None)
        assert out is x

    def test_dropout_scaling_and_bad_p(self):
        x = _t(np.ones(1000))
        out = ad.dropout(x, 0.25, np.random.default_rng(0))
        kept = out.data[out.data != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        with pytest.raises(ConfigError):
            ad.dropout(x, 1.0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            ad.dropout(x, -0.1, np.random.default_rng(0))

    def test_mean_pool_then_repeat_is_identity_on_constant(self):
        x = _t(3.25 * np.ones((2, 12)))
        pooled = ad.mean_pool(x, axis=-1, window=4)
        restored = np.repeat(pooled.data, 4, axis=-1)
        np.testing.assert_array_equal(restored, x.data)

    def test_mean_pool_requires_divisible_axis(self):
        with pytest.raises(ShapeError):
            ad.mean_pool(_t(np.ones((2, 10))), axis=-1, window=4)


class TestBackwardContract:
    def test_sum_of_squares_gradient(self):
        x = _t([1.0, -2.0, 3.0], grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_unreachable_leaf_gets_exact_zero(self):
        x = _t([1.0, 2.0], grad=True)
        y = _t([3.0, 4.0], grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = _t([1.0, 2.0], grad=True)
        with pytest.raises(GraphError):
            (x * x).backward()

    def test_double_backward_rejected(self):
        x = _t([1.0, 2.0], grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_second_loss_over_consumed_subgraph_rejected(self):
        x = _t([1.0, 2.0], grad=True)
        shared = x * x
        (shared + shared).sum().backward()
        with pytest.raises(GraphError):
            (shared * shared).sum().backward()

    def test_random_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(5,)), requires_grad=True, dtype=np.float64)

        def f(t):
            h = ad.gelu(ad.matmul(t[0], t[1]) + t[2])
            h = ad.layer_norm(h, Tensor(np.ones(5), dtype=np.float64),
                              Tensor(np.zeros(5), dtype=np.float64))
            return (ad.elu(h) * h).mean()

        assert grad_check(f, [x, w, b], h=1e-5) < 1e-4

    def test_grad_accumulates_over_shared_subexpressions(self):
        x = _t([2.0], grad=True)
        y = x * x  # reused twice below
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_tensor_data_is_immutable(self):
        x = _t([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0


class TestGradCheckContract:
    def test_quadratic_is_exact_up_to_roundoff(self):
        x = Tensor(np.arange(1.0, 6.0), requires_grad=True, dtype=np.float64)
        assert grad_check(lambda t: (t[0] * t[0]).sum(), [x]) < 1e-8

    def test_dropout_with_frozen_mask_passes(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)),
                   requires_grad=True, dtype=np.float64)

        def f(t):
            out = ad.dropout(t[0], 0.4, np.random.default_rng(42))
            return (out * out).sum()

        assert grad_check(f, [x]) < 1e-4

    def test_layer_norm_composite(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True, dtype=np.float64)
        g = Tensor(rng.normal(size=5), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=5), requires_grad=True, dtype=np.float64)
        err = grad_check(lambda t: (lambda o: (o * o).sum())(ad.layer_norm(t[0], t[1], t[2])),
                         [x, g, b])
        assert err < 1e-4

    def test_rejects_float32_inputs(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float32)
        with pytest.raises(ConfigError):
            grad_check(lambda t: (t[0] * t[0]).sum(), [x])


def _op_probes(rng):
    """One randomized probe per differentiable op; returns (name, f, inputs)."""
    def rt(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)

    n, m, k = rng.integers(2, 5, size=3)
    length = int(rng.integers(6, 12))
    width = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    probes = [
        ("arith", lambda t: ((t[0] * t[1] + t[0] - t[1]) / (t[1] * t[1] + 2.0)).sum(),
         [rt(n, m), rt(n, m)]),
        ("matmul", lambda t: (lambda o: (o * o).sum())(ad.matmul(t[0], t[1])),
         [rt(n, k), rt(k, m)]),
        ("conv1d", lambda t: (lambda o: (o * o).sum())(
            ad.conv1d(t[0], t[1], stride=stride, padding=1)),
         [rt(width, length), rt(2, width, 3)]),
        ("depthwise", lambda t: (lambda o: (o * o).sum())(
            ad.depthwise_grid_conv(t[0], t[1], axis=1)),
         [rt(2, int(rng.integers(3, 6)), width), rt(width, 3)]),
        ("layer_norm", lambda t: (lambda o: (o * o).sum())(ad.layer_norm(t[0], t[1], t[2])),
         [rt(n, m), rt(m), rt(m)]),
        ("attention", lambda t: (lambda o: (o * o).sum())(
            ad.softmax_attention(t[0], t[1], t[2])),
         [rt(n, k), rt(n, k), rt(n, k)]),
        ("gelu", lambda t: ad.gelu(t[0]).sum(), [rt(n, m)]),
        ("elu", lambda t: ad.elu(t[0]).sum(), [rt(n, m)]),
        ("mean_pool", lambda t: (lambda o: (o * o).sum())(ad.mean_pool(t[0], axis=-1, window=2)),
         [rt(width, 8)]),
        ("concat_take", lambda t: (lambda o: (o * o).sum())(
            ad.concat([t[0], t[1]], axis=0)[1:, :]),
         [rt(2, m), rt(3, m)]),
        ("exp_log_sqrt", lambda t: (ad.tlog(ad.texp(t[0]).sum(axis=-1)) +
                                    ad.tsqrt(t[0] * t[0] + 1.0).sum(axis=-1)).sum(),
         [rt(n, m)]),
        ("reshape_transpose", lambda t: (lambda o: (o * o).sum())(
            ad.swapaxes(t[0], 0, 1).reshape(m * n)),
         [rt(n, m)]),
    ]
    return probes


class TestEveryOpPropertyCheck:
    def test_ten_random_shapes_three_seeds(self):
        """Every differentiable op passes grad_check on 10 shapes x 3 seeds."""
        worst = {}
        for seed in (0, 1, 2):
            for shape_draw in range(10):
                rng = np.random.default_rng(1000 * seed + shape_draw)
                for name, f, inputs in _op_probes(rng):
                    err = grad_check(f, inputs, h=1e-5)
                    worst[name] = max(worst.get(name, 0.0), err)
        for name, err in worst.items():
            assert err < 1e-4, f"{name}: {err}"


class TestDeterminism:
    def test_graph_reexecution_is_bit_identical(self):
        x = Tensor(np.random.default_rng(5).normal(size=(4, 8)), dtype=np.float64)

        def run():
            rng = DropoutRng(seed=11, step=3)
            h = ad.dropout(x, 0.3, rng.next_op())
            h = ad.gelu(h)
            return ad.dropout(h, 0.3, rng.next_op()).data

        np.testing.assert_array_equal(run(), run())

    def test_dropout_rng_distinguishes_ops_and_steps(self):
        rng = DropoutRng(seed=0, step=0)
        a = rng.next_op().random(8)
        b = rng.next_op().random(8)
        rng.begin_step(1)
        c = rng.next_op().random(8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
