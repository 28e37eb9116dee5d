import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialoseq import tensor as T
from dialoseq.errors import NumericError, ShapeError, TapeError


def t64(data, rg=False):
    return T.Tensor(data, requires_grad=rg, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        eye = t64(np.eye(2))
        m = t64([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(eye, m).data, m.data)

    def test_hand_product(self):
        # oracle: hand multiplication of [[1,2],[3,4]] x [[5,6],[7,8]]
        out = T.matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_scalar_1x1(self):
        assert T.matmul(t64([[2.0]]), t64([[3.0]])).data[0, 0] == 6.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_associativity_on_random_chains(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b, c = (t64(rng.normal(size=(4, 4))) for _ in range(3))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.allclose(left, right, rtol=1e-6, atol=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(t64([0.0, 0.0])).data
        assert np.allclose(out, [0.5, 0.5], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=12)
        for c in (-50.0, 3.0, 99.0):
            assert np.allclose(
                T.softmax(t64(x)).data, T.softmax(t64(x + c)).data, atol=1e-12
            )

    def test_closed_form(self):
        out = T.softmax(t64([0.0, math.log(3.0)])).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            T.softmax(t64(np.zeros(0)))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=50))
    def test_sums_to_one(self, xs):
        out = T.softmax(t64(np.array(xs))).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert (out > 0).all()


class TestCrossEntropy:
    @pytest.mark.parametrize("v", [2, 10, 100])
    def test_uniform_logits_is_log_v(self, v):
        logits = t64(np.zeros((4, v)))
        out = T.cross_entropy_nll(logits, np.arange(4) % v)
        assert abs(float(out.data) - math.log(v)) < 1e-9

    def test_confident_logits_near_zero(self):
        logits = np.zeros((3, 10))
        targets = np.array([1, 4, 7])
        logits[np.arange(3), targets] = 1e4
        out = T.cross_entropy_nll(t64(logits), targets)
        assert float(out.data) < 1e-8

    def test_hand_computed_value(self):
        # per-position oracle: -log softmax(logits_t)[target_t], averaged
        logits = np.array([[0.5, -1.0, 2.0], [1.0, 1.0, -3.0]])
        targets = np.array([2, 0])
        expected = 0.0
        for row, tgt in zip(logits, targets):
            e = np.exp(row - row.max())
            expected -= math.log(e[tgt] / e.sum())
        expected /= 2
        out = T.cross_entropy_nll(t64(logits), targets)
        assert abs(float(out.data) - expected) < 1e-12

    def test_ignore_index(self):
        logits = np.zeros((3, 5))
        logits[0, 1] = 3.0
        full = T.cross_entropy_nll(t64(logits[:1]), np.array([1]))
        padded = T.cross_entropy_nll(t64(logits), np.array([1, 0, 0]), ignore_index=0)
        assert abs(float(full.data) - float(padded.data)) < 1e-12

    def test_all_ignored_rejected(self):
        with pytest.raises(NumericError):
            T.cross_entropy_nll(t64(np.zeros((2, 3))), np.array([0, 0]), ignore_index=0)

    def test_target_out_of_range(self):
        with pytest.raises(ShapeError):
            T.cross_entropy_nll(t64(np.zeros((1, 3))), np.array([3]))


class TestBackward:
    def test_square_gradient(self):
        x = t64(3.0, rg=True)
        loss = T.mul(x, x)
        T.backward(loss)
        assert x.grad == pytest.approx(6.0)

    def test_matmul_grad_matches_central_differences(self):
        # independent oracle: central differences done inline, eps=1e-5
        rng = np.random.default_rng(3)
        a = t64(rng.normal(size=(3, 4)), rg=True)
        b = t64(rng.normal(size=(4, 2)), rg=True)
        loss = T.tsum(T.matmul(a, b))
        T.backward(loss)
        eps = 1e-5
        flat = a.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with T.no_grad():
                up = float(T.tsum(T.matmul(a, b)).data)
            flat[i] = orig - eps
            with T.no_grad():
                down = float(T.tsum(T.matmul(a, b)).data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            ga = a.grad.reshape(-1)[i]
            assert abs(ga - fd) / max(1e-8, abs(ga) + abs(fd)) < 1e-4

    def test_unreachable_leaf_gets_zero(self):
        x = t64([1.0, 2.0], rg=True)
        other = t64([5.0], rg=True)
        T.backward(T.tsum(T.mul(x, x)))
        assert np.array_equal(other.grad, [0.0])

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0], rg=True)
        with pytest.raises(ShapeError):
            T.backward(T.mul(x, x))

    def test_tape_reuse_rejected(self):
        x = t64(2.0, rg=True)
        loss = T.mul(x, x)
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)

    def test_grad_accumulates_across_builds(self):
        x = t64(2.0, rg=True)
        T.backward(T.mul(x, x))
        T.backward(T.mul(x, x))
        assert x.grad == pytest.approx(8.0)

    def test_no_grad_suppresses_recording(self):
        x = t64(2.0, rg=True)
        with T.no_grad():
            loss = T.mul(x, x)
        with pytest.raises(TapeError):
            T.backward(loss)


def _random_graph(rng, leaves):
    """Random composition of the op set, ending in a scalar."""
    a, b = leaves
    h = T.matmul(a, b)                                   # (3, 3)
    h = T.add(h, T.scale(T.transpose(h), 0.5))
    h = T.gelu(h)
    g = T.Tensor(np.ones(3), dtype=np.float64, requires_grad=False)
    z = T.Tensor(np.zeros(3), dtype=np.float64, requires_grad=False)
    h = T.layer_norm(h, g, z)
    h = T.mul(h, h)
    h = T.softmax(h)
    mask = np.zeros((3, 3), dtype=bool)
    mask[0, 0] = True
    h = T.masked_fill(h, mask, 0.25)
    h = T.reshape(T.concat([h, h], axis=1), (-1, 3))
    return T.tsum(h)


class TestFiniteDiffCheck:
    def test_exact_quadratic(self):
        rng = np.random.default_rng(11)
        x = t64(rng.normal(size=8), rg=True)
        err = T.finite_diff_check(lambda: T.tsum(T.mul(x, x)), [x], 1e-5)
        assert err < 1e-6

    def test_constant_function(self):
        x = t64([1.0, 2.0], rg=True)
        c = t64([[4.0]])
        err = T.finite_diff_check(lambda: T.tsum(T.add(c, T.scale(T.tsum(T.mul(x, T.Tensor(np.zeros(2), dtype=np.float64))), 1.0))), [x], 1e-5)
        assert err < 1e-6

    def test_epsilon_positive_required(self):
        x = t64([1.0], rg=True)
        with pytest.raises(ShapeError):
            T.finite_diff_check(lambda: T.tsum(x), [x], 0.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_random_graph_compositions(self, seed):
        rng = np.random.default_rng(seed)
        # keep leaves away from relu/abs kinks
        a = t64(rng.uniform(0.2, 1.2, size=(3, 4)), rg=True)
        b = t64(rng.uniform(0.2, 1.2, size=(4, 3)), rg=True)
        err = T.finite_diff_check(lambda: _random_graph(rng, (a, b)), [a, b], 1e-5)
        assert err < 1e-4


class TestOpsMisc:
    def test_nan_policy_names_op(self):
        with pytest.raises(NumericError, match="log"):
            T.log(t64([0.0]))

    def test_relu_and_backward(self):
        x = t64([-1.0, 0.5, 2.0], rg=True)
        T.backward(T.tsum(T.relu(x)))
        assert np.array_equal(x.grad, [0.0, 1.0, 1.0])

    def test_embedding_scatter_grad(self):
        table = t64(np.arange(12.0).reshape(4, 3), rg=True)
        ids = np.array([1, 1, 3])
        out = T.embedding(table, ids)
        assert out.shape == (3, 3)
        T.backward(T.tsum(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(table.grad, expected)

    def test_dropout_eval_is_identity(self):
        x = t64(np.ones(100))
        rng = np.random.default_rng(0)
        assert T.dropout(x, 0.5, rng, training=False) is x

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(0)
        x = t64(np.ones(20000), rg=True)
        out = T.dropout(x, 0.25, rng, training=True)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 1.0 / 0.75)
        assert abs((out.data == 0).mean() - 0.25) < 0.02

    def test_broadcast_add_grad_reduces(self):
        x = t64(np.ones((2, 3)), rg=True)
        bias = t64(np.zeros(3), rg=True)
        T.backward(T.tsum(T.add(x, bias)))
        assert np.array_equal(bias.grad, [2.0, 2.0, 2.0])

    def test_concat_roundtrip_grads(self):
        a = t64(np.ones((2, 2)), rg=True)
        b = t64(np.ones((3, 2)), rg=True)
        out = T.concat([a, b], axis=0)
        assert out.shape == (5, 2)
        T.backward(T.scale(T.tsum(out), 2.0))
        assert np.array_equal(a.grad, np.full((2, 2), 2.0))
        assert np.array_equal(b.grad, np.full((3, 2), 2.0))

    def test_layer_norm_normalizes(self):
        rng = np.random.default_rng(5)
        x = t64(rng.normal(3.0, 2.0, size=(4, 16)))
        g = t64(np.ones(16))
        b = t64(np.zeros(16))
        y = T.layer_norm(x, g, b).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        assert np.allclose(y.std(axis=-1), 1.0, atol=1e-2)
