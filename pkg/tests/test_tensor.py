import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain import tensor as T
from helpers import check_op_gradient, finite_difference_gradient, relative_error


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(T.matmul(a, b).numpy(), [[1, 2], [3, 4]])

    def test_orthogonal_basis(self):
        out = T.matmul(T.Tensor([[1.0, 0.0]]), T.Tensor([[0.0], [1.0]]))
        np.testing.assert_allclose(out.numpy(), [[0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        check_op_gradient(T.matmul, [(3, 4), (4, 2)], seed=1)

    def test_batched_gradient(self):
        check_op_gradient(T.matmul, [(2, 3, 4), (2, 4, 5)], seed=2)

    def test_broadcast_weight_gradient(self):
        # [B,S,H] @ [H,K]: gradient of the shared weight sums over the batch.
        check_op_gradient(T.matmul, [(2, 3, 4), (4, 5)], seed=3)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.numpy(), [1 / 3] * 3, atol=1e-7)

    def test_stabilized_against_overflow(self):
        out = T.softmax(T.Tensor([1000.0, 0.0])).numpy()
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_high_precision_oracle(self):
        # mpmath, 40 digits: exp(x)/sum(exp) for x = [1, 2, 3]
        expected = [0.09003057317038046, 0.24472847105479765, 0.6652409557748219]
        out = T.softmax(T.Tensor([1.0, 2.0, 3.0], dtype=np.float64)).numpy()
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_rows_normalized_nonnegative(self, xs):
        out = T.softmax(T.Tensor(np.array(xs, dtype=np.float64))).numpy()
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-6

    def test_gradient(self):
        def weighted(x):
            return T.mul(T.softmax(x, axis=-1), T.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3)))

        check_op_gradient(weighted, [(2, 3)], seed=4)


class TestElementwise:
    @pytest.mark.parametrize(
        "op,shapes",
        [
            (T.add, [(3, 2), (3, 2)]),
            (T.sub, [(4,), (4,)]),
            (T.mul, [(2, 3), (2, 3)]),
            (T.div, [(3,), (3,)]),
            (T.tanh, [(5,)]),
            (T.exp, [(4,)]),
            (T.gelu, [(6,)]),
            (T.log_softmax, [(3, 4)]),
        ],
    )
    def test_gradients(self, op, shapes):
        if op is T.div:
            # keep the denominator away from zero
            rng = np.random.default_rng(0)
            a = rng.standard_normal(3)
            b = rng.standard_normal(3) + 3.0
            ta = T.Tensor(a, requires_grad=True, dtype=np.float64)
            tb = T.Tensor(b, requires_grad=True, dtype=np.float64)
            T.backward(T.div(ta, tb).sum())
            for arr, tens, idx in [(a, ta, 0), (b, tb, 1)]:
                def f(x, idx=idx):
                    with T.no_grad():
                        args = [T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64)]
                        args[idx] = T.Tensor(x, dtype=np.float64)
                        return T.div(*args).sum().item()

                numeric = finite_difference_gradient(f, arr.copy())
                assert relative_error(tens.grad, numeric) < 1e-5
        else:
            check_op_gradient(op, shapes, seed=5)

    def test_broadcast_add_gradient(self):
        check_op_gradient(T.add, [(2, 3, 4), (4,)], seed=6)

    def test_log_gradient(self):
        x = np.abs(np.random.default_rng(7).standard_normal(5)) + 0.5
        t = T.Tensor(x, requires_grad=True, dtype=np.float64)
        T.backward(T.log(t).sum())
        np.testing.assert_allclose(t.grad, 1.0 / x, rtol=1e-12)


class TestLayerNorm:
    def test_constant_row_zeros_before_affine(self):
        x = T.Tensor(np.full((2, 4), 3.0))
        out = T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.numpy(), np.zeros((2, 4)), atol=1e-5)

    def test_row_statistics(self):
        rng = np.random.default_rng(8)
        x = T.Tensor(rng.standard_normal((3, 16)), dtype=np.float64)
        out = T.layer_norm(x, T.Tensor(np.ones(16), dtype=np.float64), T.Tensor(np.zeros(16), dtype=np.float64))
        np.testing.assert_allclose(out.numpy().mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.numpy().var(axis=-1), 1.0, atol=1e-6)

    def test_gradient(self):
        check_op_gradient(T.layer_norm, [(2, 5), (5,), (5,)], seed=9)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.layer_norm(T.Tensor(np.zeros((2, 4))), T.Tensor(np.ones(3)), T.Tensor(np.zeros(4)))


class TestDropout:
    def test_identity_when_p_zero(self):
        x = T.Tensor(np.arange(6.0))
        out = T.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.numpy(), x.numpy())

    def test_identity_in_eval_mode(self):
        x = T.Tensor(np.arange(6.0))
        out = T.dropout(x, 0.5, training=False)
        np.testing.assert_array_equal(out.numpy(), x.numpy())

    def test_kept_activations_scaled(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(np.ones(10000))
        out = T.dropout(x, 0.25, training=True, rng=rng).numpy()
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75, rtol=1e-6)
        assert abs(len(kept) / 10000 - 0.75) < 0.02

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            T.dropout(T.Tensor([1.0]), 1.0, training=True, rng=np.random.default_rng(0))


class TestIndexingAndReductions:
    def test_getitem_slice_gradient(self):
        x = T.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True, dtype=np.float64)
        T.backward(x[1:, :2].sum())
        expected = np.zeros((3, 4))
        expected[1:, :2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_getitem_integer_array_accumulates(self):
        x = T.Tensor(np.arange(4.0), requires_grad=True, dtype=np.float64)
        idx = np.array([0, 0, 3])
        T.backward(x[idx].sum())
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 0.0, 1.0])

    def test_embedding_lookup_gradient_and_range_check(self):
        table = T.Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True, dtype=np.float64)
        out = T.embedding_lookup(table, np.array([[0, 1], [1, 3]]))
        assert out.shape == (2, 2, 2)
        T.backward(out.sum())
        np.testing.assert_array_equal(table.grad, [[1, 1], [2, 2], [0, 0], [1, 1]])
        with pytest.raises(IndexError, match="vocabulary"):
            T.embedding_lookup(table, np.array([4]))

    def test_sum_mean_gradients(self):
        check_op_gradient(lambda x: T.tsum(x, axis=1), [(3, 4)], seed=10)
        check_op_gradient(lambda x: T.tmean(x, axis=0, keepdims=True), [(3, 4)], seed=11)

    def test_logsumexp_gradient(self):
        check_op_gradient(lambda x: T.logsumexp(x, axis=1), [(3, 4)], seed=12)

    def test_transpose_reshape_roundtrip_gradient(self):
        check_op_gradient(lambda x: T.reshape(T.transpose(x, (1, 0, 2)), (4, 6)), [(2, 2, 6)], seed=13)


class TestBackward:
    def test_sum_gives_ones(self):
        w = T.Tensor(np.arange(5.0), requires_grad=True)
        T.backward(w.sum())
        np.testing.assert_array_equal(w.grad, np.ones(5))

    def test_quadratic_gives_two_w(self):
        w = T.Tensor(np.arange(5.0), requires_grad=True, dtype=np.float64)
        T.backward(T.mul(w, w).sum())
        np.testing.assert_allclose(w.grad, 2 * np.arange(5.0))

    def test_non_scalar_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(w + w)

    def test_repeated_backward_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        loss = w.sum()
        T.backward(loss)
        with pytest.raises(RuntimeError, match="already"):
            T.backward(loss)

    def test_diamond_graph_accumulates_once_per_node(self):
        # f = sum(a*a + a*a): each path contributes, total grad 4a
        a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        sq = T.mul(a, a)
        T.backward(T.add(sq, sq).sum())
        np.testing.assert_allclose(a.grad, 4 * np.array([1.0, 2.0]))

    def test_tape_visits_each_node_once(self):
        a = T.Tensor(np.ones(2), requires_grad=True)
        b = T.mul(a, a)
        c = T.add(b, b)
        root = c.sum()
        tape = T.Tape(root)
        assert len(tape.nodes) == len({id(n) for n in tape.nodes})
        assert {id(a), id(b), id(c), id(root)} <= {id(n) for n in tape.nodes}

    def test_tape_clear_releases_intermediates(self):
        a = T.Tensor(np.ones(2), requires_grad=True)
        root = T.mul(a, a).sum()
        tape = T.Tape(root)
        tape.clear()
        assert root._parents == () and root._backward is None

    def test_grads_finite_after_backward(self):
        rng = np.random.default_rng(14)
        a = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        T.backward(T.softmax(T.matmul(a, b)).sum())
        assert np.isfinite(a.grad).all() and np.isfinite(b.grad).all()

    def test_no_grad_suppresses_recording(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.mul(a, a)
        assert out._parents == ()
