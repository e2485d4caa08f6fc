"""Tensor core: forward values against known results, gradients against
central finite differences, and the graph/determinism contracts."""

import numpy as np
import pytest

from mocapspec import tensor as T
from mocapspec.errors import ConfigError, ContractError, ShapeError
from mocapspec.rng import RngState
from mocapspec.tensor import Tensor

from helpers import max_rel_err, numeric_grad


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal((eye @ b).data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_arithmetic(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            Tensor(np.zeros((4, 5))) @ Tensor(np.zeros((3, 2)))
        assert "(4, 5)" in str(err.value) and "(3, 2)" in str(err.value)

    def test_batch_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 4, 5))) @ Tensor(np.zeros((3, 5, 2)))

    def test_gradient_vs_finite_differences(self):
        rng = RngState(11)
        a = rng.gen.normal(size=(4, 5))
        b = rng.gen.normal(size=(5, 3))
        proj = rng.gen.normal(size=(4, 3))

        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        loss = ((ta @ tb) * Tensor(proj)).sum()
        loss.backward()

        def scalar():
            return float(((a @ b) * proj).sum())

        assert max_rel_err(ta.grad, numeric_grad(scalar, a), floor=1e-6) < 1e-6
        assert max_rel_err(tb.grad, numeric_grad(scalar, b), floor=1e-6) < 1e-6

    def test_broadcast_batch_gradient(self):
        rng = RngState(12)
        a = rng.gen.normal(size=(3, 1, 2, 4))
        b = rng.gen.normal(size=(5, 4, 2))
        proj = rng.gen.normal(size=(3, 5, 2, 2))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ((ta @ tb) * Tensor(proj)).sum().backward()

        def scalar():
            return float(((a @ b) * proj).sum())

        assert max_rel_err(ta.grad, numeric_grad(scalar, a)) < 1e-5
        assert max_rel_err(tb.grad, numeric_grad(scalar, b)) < 1e-5


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_extreme_inputs_stay_finite(self):
        out = T.softmax_lastdim(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0, abs=1e-15)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        x = RngState(5).gen.normal(size=(3, 7)) * 10
        out = T.softmax_lastdim(Tensor(x))
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12

    def test_gradient(self):
        rng = RngState(6)
        x = rng.gen.normal(size=(3, 5))
        proj = rng.gen.normal(size=(3, 5))
        tx = Tensor(x, requires_grad=True)
        (T.softmax_lastdim(tx) * Tensor(proj)).sum().backward()

        def scalar():
            z = x - x.max(axis=-1, keepdims=True)
            e = np.exp(z)
            return float((e / e.sum(axis=-1, keepdims=True) * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5


class TestLayerNorm:
    def test_constant_row_maps_to_beta(self):
        out = T.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-4)  # off only by eps

    def test_rows_normalized(self):
        x = RngState(7).gen.normal(size=(6, 8)) * 3 + 1
        out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-10
        # eps shrinks the variance to var/(var+eps)
        var = x.var(axis=-1)
        assert np.max(np.abs(out.var(axis=-1) - var / (var + 1e-5))) < 1e-6

    def test_shift_invariance(self):
        x = RngState(8).gen.normal(size=(4, 6))
        g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
        base = T.layer_norm(Tensor(x), g, b).data
        shifted = T.layer_norm(Tensor(x + 3.7), g, b).data
        assert np.max(np.abs(base - shifted)) < 1e-10

    def test_gradient_all_inputs(self):
        rng = RngState(9)
        x = rng.gen.normal(size=(4, 6))
        gamma = rng.gen.normal(size=6)
        beta = rng.gen.normal(size=6)
        proj = rng.gen.normal(size=(4, 6))

        tx = Tensor(x, requires_grad=True)
        tg = Tensor(gamma, requires_grad=True)
        tb = Tensor(beta, requires_grad=True)
        (T.layer_norm(tx, tg, tb) * Tensor(proj)).sum().backward()

        def scalar():
            mu = x.mean(axis=-1, keepdims=True)
            xc = x - mu
            inv = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + 1e-5)
            return float(((xc * inv * gamma + beta) * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5
        assert max_rel_err(tg.grad, numeric_grad(scalar, gamma)) < 1e-5
        assert max_rel_err(tb.grad, numeric_grad(scalar, beta)) < 1e-5

    def test_plain_normalization_without_affine(self):
        x = RngState(10).gen.normal(size=(3, 4))
        out = T.layer_norm(Tensor(x), None, None)
        assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-12
        with pytest.raises(ContractError):
            T.layer_norm(Tensor(x), Tensor(np.ones(4)), None)

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            T.layer_norm(Tensor([1.0, 2.0]), None, None, eps=0.0)


class TestActivations:
    def test_softplus_at_zero(self):
        assert T.softplus(Tensor([0.0])).data[0] == pytest.approx(np.log(2.0), rel=1e-12)

    def test_softplus_linear_asymptote(self):
        out = T.softplus(Tensor([1000.0, -1000.0])).data
        assert out[0] == pytest.approx(1000.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(out))

    def test_relu_values_and_gradient(self):
        rng = RngState(13)
        x = rng.gen.normal(size=(5, 4))
        x += np.where(x >= 0, 0.1, -0.1)  # keep entries away from the kink
        proj = rng.gen.normal(size=(5, 4))
        tx = Tensor(x, requires_grad=True)
        out = T.relu(tx)
        assert np.array_equal(out.data, np.maximum(x, 0.0))
        (out * Tensor(proj)).sum().backward()

        def scalar():
            return float((np.maximum(x, 0.0) * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5

    def test_softplus_gradient(self):
        rng = RngState(14)
        x = rng.gen.normal(size=(3, 4)) * 2
        proj = rng.gen.normal(size=(3, 4))
        tx = Tensor(x, requires_grad=True)
        (T.softplus(tx) * Tensor(proj)).sum().backward()

        def scalar():
            return float((np.logaddexp(0.0, x) * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(RngState(1).gen.normal(size=(10,)))
        assert T.dropout(x, 0.3, None, training=False) is x

    def test_bad_probability(self):
        x = Tensor(np.ones(3))
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigError):
                T.dropout(x, p, RngState(0), training=True)

    def test_missing_rng_in_training(self):
        with pytest.raises(ContractError):
            T.dropout(Tensor(np.ones(3)), 0.5, None, training=True)

    def test_statistics_over_a_million_elements(self):
        x = RngState(21).gen.uniform(0.5, 1.5, size=1_000_000)
        out = T.dropout(Tensor(x), 0.3, RngState(22), training=True).data
        survival = np.mean(out != 0.0)
        assert abs(survival - 0.7) < 0.002
        assert abs(out.mean() - x.mean()) / x.mean() < 0.01

    def test_gradient_through_fixed_mask(self):
        rng = RngState(23)
        x = rng.gen.normal(size=(6, 6))
        proj = rng.gen.normal(size=(6, 6))
        tx = Tensor(x, requires_grad=True)
        (T.dropout(tx, 0.4, RngState(24), training=True) * Tensor(proj)).sum().backward()

        def scalar():
            keep = RngState(24).gen.random(x.shape) >= 0.4
            return float((x * keep / 0.6 * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5

    def test_same_stream_same_mask(self):
        x = Tensor(np.ones((100,)))
        a = T.dropout(x, 0.5, RngState(3, (1, 2)), training=True).data
        b = T.dropout(x, 0.5, RngState(3, (1, 2)), training=True).data
        assert np.array_equal(a, b)


class TestShapeOpsAndReductions:
    def test_reshape_transpose_sum_gradients(self):
        rng = RngState(31)
        x = rng.gen.normal(size=(2, 3, 4))
        proj = rng.gen.normal(size=(4, 6))
        tx = Tensor(x, requires_grad=True)
        out = tx.transpose(2, 0, 1).reshape(4, 6)
        (out * Tensor(proj)).sum().backward()

        def scalar():
            return float((x.transpose(2, 0, 1).reshape(4, 6) * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5

    def test_axis_sum_and_mean(self):
        rng = RngState(32)
        x = rng.gen.normal(size=(3, 4, 5))
        tx = Tensor(x, requires_grad=True)
        out = tx.sum(axis=1)
        assert np.allclose(out.data, x.sum(axis=1))
        proj = rng.gen.normal(size=out.data.shape)
        (out * Tensor(proj)).sum().backward()

        def scalar():
            return float((x.sum(axis=1) * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5
        assert Tensor(x).mean().data == pytest.approx(x.mean(), rel=1e-13)

    def test_broadcast_add_mul_pow_gradients(self):
        rng = RngState(33)
        x = rng.gen.normal(size=(4, 5))
        b = rng.gen.normal(size=(5,))
        proj = rng.gen.normal(size=(4, 5))
        tx = Tensor(x, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        ((tx * tb + tb) ** 2 * Tensor(proj)).sum().backward()

        def scalar():
            return float(((x * b + b) ** 2 * proj).sum())

        assert max_rel_err(tx.grad, numeric_grad(scalar, x)) < 1e-5
        assert max_rel_err(tb.grad, numeric_grad(scalar, b)) < 1e-5

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).reshape(4, 2)


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        x = Tensor(RngState(41).gen.normal(size=(3, 3)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 3)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_unused_leaf_has_zero_gradient(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        used.sum().backward()
        assert np.array_equal(unused.grad, np.zeros(3))

    def test_gradients_accumulate_across_consumers(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        loss = (x * 3.0 + x * x).sum()  # d/dx = 3 + 2x = 7
        loss.backward()
        assert x.grad[0] == pytest.approx(7.0, rel=1e-14)

    def test_tiny_two_layer_net_matches_finite_differences(self):
        rng = RngState(42)
        x = rng.gen.normal(size=(4, 3))
        w1 = rng.gen.normal(size=(3, 5)) * 0.5
        b1 = rng.gen.normal(size=5) * 0.1
        w2 = rng.gen.normal(size=(5, 2)) * 0.5
        b2 = rng.gen.normal(size=2) * 0.1
        target = rng.gen.normal(size=(4, 2))

        params = [w1, b1, w2, b2]
        tensors = [Tensor(p, requires_grad=True) for p in params]

        def forward(tw1, tb1, tw2, tb2):
            hidden = T.relu(Tensor(x) @ tw1 + tb1)
            diff = hidden @ tw2 + tb2 - Tensor(target)
            return (diff * diff).mean()

        forward(*tensors).backward()

        def scalar():
            hidden = np.maximum(x @ w1 + b1, 0.0)
            diff = hidden @ w2 + b2 - target
            return float((diff * diff).mean())

        for t, p in zip(tensors, params):
            assert max_rel_err(t.grad, numeric_grad(scalar, p)) < 1e-5

    def test_forward_backward_deterministic(self):
        def run():
            rng = RngState(77)
            x = Tensor(rng.gen.normal(size=(5, 4)), requires_grad=True)
            h = T.dropout(T.relu(x @ Tensor(rng.gen.normal(size=(4, 4)))),
                          0.3, rng.child(9), training=True)
            loss = (h * h).mean()
            loss.backward()
            return loss.data.copy(), x.grad.copy()

        loss_a, grad_a = run()
        loss_b, grad_b = run()
        assert np.array_equal(loss_a, loss_b)
        assert np.array_equal(grad_a, grad_b)

    def test_no_nans_on_finite_extremes(self):
        x = Tensor(np.array([[-1e3, 0.0, 1e3], [5.0, -5.0, 0.1]]))
        for out in (
            T.softmax_lastdim(x),
            T.softplus(x),
            T.relu(x),
            T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))),
            T.dropout(x, 0.5, RngState(1), training=True),
        ):
            assert np.all(np.isfinite(out.data))
