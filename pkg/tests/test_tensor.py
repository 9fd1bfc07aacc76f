"""Reverse-mode engine: op gradients, broadcasting, error contracts and tape semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refiner_nmt import tensor as T
from refiner_nmt.gradcheck import grad_check
from refiner_nmt.tensor import DomainError, Graph, ShapeError, Tensor

TOL = 1e-6


def _rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def _weighted(y, seed=99):
    """Scalar projection of ``y`` with fixed random weights, so no gradient is uniform."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return T.sum_(y * w)


class TestBasics:
    def test_square_sum_gradient(self):
        x = T.parameter([2.0, 3.0])
        with Graph() as g:
            loss = T.sum_(x * x)
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 6.0])

    def test_leaf_gradients_accumulate(self):
        x = T.parameter([1.0, -1.0])
        for _ in range(2):
            with Graph() as g:
                loss = T.sum_(x * 3.0)
            g.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_shared_input_sums_paths(self):
        x = T.parameter([1.5])
        with Graph() as g:
            loss = T.sum_(x * x + x)
        g.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_no_grad_records_nothing(self):
        x = T.parameter(_rand(3))
        with Graph() as g:
            with T.no_grad():
                y = T.tanh(x)
        assert len(g) == 0
        assert not y.requires_grad

    def test_constants_are_not_recorded(self):
        with Graph() as g:
            T.tanh(Tensor(_rand(3)))
        assert len(g) == 0

    def test_unreached_param_gets_zero_grad(self):
        x, unused = T.parameter(_rand(2)), T.parameter(_rand(3))
        with Graph() as g:
            loss = T.sum_(x)
        g.backward(loss, params=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(3))

    def test_grad_of_intermediate(self):
        x = T.parameter(_rand(4))
        with Graph() as g:
            h = T.tanh(x)
            loss = T.sum_(h * h)
        (gh,) = g.grad(loss, [h])
        np.testing.assert_allclose(gh, 2 * np.tanh(x.data))
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = T.parameter(_rand(3))
        with Graph() as g:
            y = x * 2.0
        with pytest.raises(ShapeError):
            g.backward(y)


class TestErrors:
    def test_add_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
            T.add(np.ones((2, 3)), np.ones(4))

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_matmul_needs_two_dims(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones(3), np.ones((3, 2)))

    def test_log_of_nonpositive(self):
        with pytest.raises(DomainError):
            T.log(np.array([1.0, 0.0]))

    def test_embedding_out_of_range(self):
        with pytest.raises(ShapeError):
            T.embedding(np.ones((4, 2)), np.array([4]))

    def test_split_sizes_must_cover(self):
        with pytest.raises(ShapeError):
            T.split(np.ones((2, 5)), (2, 2))


UNARY = {
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "exp": T.exp,
    "log": lambda x: T.log(T.exp(x) + 0.5),
    "softmax": T.softmax,
    "neg": T.neg,
    "reshape": lambda x: T.reshape(x, (-1,)),
    "slice": lambda x: x[:, 1:3],
    "sum_axis": lambda x: T.sum_(x, axis=0),
    "mean_keepdims": lambda x: T.mean(x, axis=1, keepdims=True),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name):
        fn = UNARY[name]
        assert grad_check(lambda x: _weighted(fn(x)), _rand(3, 4, seed=1)) < TOL

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
    def test_binary_broadcast_both_sides(self, op):
        other = _rand(1, 4, seed=2)
        assert grad_check(lambda x: _weighted(op(x, other)), _rand(3, 4)) < TOL
        full = _rand(3, 4, seed=3)
        assert grad_check(lambda x: _weighted(op(full, x)), _rand(1, 4)) < TOL
        assert grad_check(lambda x: _weighted(op(full, x)), _rand(4)) < TOL

    def test_matmul_left_right_and_batched(self):
        w = _rand(4, 5, seed=4)
        assert grad_check(lambda x: _weighted(x @ w), _rand(3, 4)) < TOL
        a = _rand(2, 3, 4, seed=5)
        assert grad_check(lambda x: _weighted(a @ x), _rand(4, 5)) < TOL
        assert grad_check(lambda x: _weighted(x @ w), _rand(2, 3, 4)) < TOL
        b = _rand(2, 4, 5, seed=6)
        assert grad_check(lambda x: _weighted(x @ b), _rand(2, 3, 4)) < TOL
        assert grad_check(lambda x: _weighted(_rand(2, 1, 3) @ x), _rand(2, 3, 5)) < TOL

    def test_concat_split_stack_unstack(self):
        other = _rand(3, 2, seed=7)
        assert grad_check(lambda x: _weighted(T.concat([x, other])), _rand(3, 4)) < TOL
        assert grad_check(lambda x: _weighted(T.split(x, (1, 3))[1] * 2.0), _rand(3, 4)) < TOL
        assert grad_check(lambda x: _weighted(T.stack([x, x * 2.0], axis=1)), _rand(3, 4)) < TOL
        assert grad_check(lambda x: _weighted(T.unstack(x, axis=1)[2]), _rand(3, 4, 2)) < TOL

    def test_embedding_and_gather(self):
        ids = np.array([[0, 2, 2], [1, 0, 3]])
        assert grad_check(lambda t: _weighted(T.embedding(t, ids)), _rand(4, 3)) < TOL
        pick = np.array([[1, 0], [2, 2]])
        assert grad_check(lambda x: _weighted(T.gather(T.softmax(x), pick)), _rand(2, 2, 3)) < TOL

    def test_dropout_uses_the_same_mask(self):
        def fn(x):
            return _weighted(T.dropout(x, 0.5, np.random.default_rng(3), training=True))

        assert grad_check(fn, _rand(4, 5)) < TOL

    def test_softmax_near_saturation_matches_closed_form(self):
        # finite differences lose to roundoff here; compare with diag(p) - p p^T instead
        x = T.parameter([[12.0, 0.0, -5.0]])
        w = np.array([[0.3, -1.2, 2.0]])
        with Graph() as g:
            loss = T.sum_(T.softmax(x) * w)
        g.backward(loss)
        p = T.softmax(x.data).data[0]
        jac = np.diag(p) - np.outer(p, p)
        np.testing.assert_allclose(x.grad[0], jac @ w[0], rtol=1e-8, atol=1e-20)


class TestForwardValues:
    def test_sigmoid_extremes_are_finite(self):
        y = T.sigmoid(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0])

    def test_softmax_rows_sum_to_one_and_are_positive(self):
        p = T.softmax(np.array([[1000.0, 0.0], [-1000.0, 1000.0]])).data
        np.testing.assert_allclose(p.sum(-1), 1.0)
        assert (p > 0).all()

    def test_dropout_is_identity_at_eval(self):
        x = _rand(3, 3)
        np.testing.assert_array_equal(T.dropout(x, 0.3, None, training=False).data, x)

    def test_dropout_keeps_expectation(self):
        y = T.dropout(np.ones(200_000), 0.3, np.random.default_rng(0), training=True).data
        assert abs(y.mean() - 1.0) < 0.01

    def test_straight_through_lowest_index_wins_ties(self):
        y = T.straight_through(np.array([[0.5, 0.5], [0.2, 0.8]])).data
        np.testing.assert_array_equal(y, [[1.0, 0.0], [0.0, 1.0]])


finite = st.floats(-5, 5, allow_nan=False)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
    def test_softmax_is_shift_invariant(self, x):
        np.testing.assert_allclose(T.softmax(x).data, T.softmax(x + 3.7).data, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.integers(1, 6), elements=finite))
    def test_sigmoid_symmetry(self, x):
        np.testing.assert_allclose(T.sigmoid(x).data + T.sigmoid(-x).data, 1.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
    def test_add_gradient_is_ones(self, x):
        a, b = T.parameter(x), T.parameter(x[:1])
        with Graph() as g:
            loss = T.sum_(a + b)
        g.backward(loss)
        np.testing.assert_array_equal(a.grad, np.ones_like(x))
        np.testing.assert_array_equal(b.grad, np.full((1, x.shape[1]), x.shape[0], dtype=float))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 4)), elements=finite))
    def test_tanh_gradient_matches_finite_differences(self, x):
        assert grad_check(lambda v: _weighted(T.tanh(v)), x) < 1e-5


class TestUnrecordedLoss:
    def test_loss_built_outside_the_graph_is_rejected(self):
        x = T.parameter(np.array([1.0, 2.0]))
        with Graph() as g:
            y = x * 3.0
        loss = T.sum_(y)
        with pytest.raises(ValueError, match="not recorded"):
            g.grad(loss, [x])

    def test_loss_from_another_graph_is_rejected(self):
        x = T.parameter(np.array([1.0, 2.0]))
        with Graph():
            loss = T.sum_(x * x)
        with Graph() as other:
            T.sum_(x)
        with pytest.raises(ValueError, match="not recorded"):
            other.grad(loss, [x])
