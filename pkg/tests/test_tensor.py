import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdcap import tensor as T
from pdcap.errors import ContractError, DimensionError, VocabularyError
from pdcap.tensor import Tensor

from oracles import central_difference

GRAD_TOL = 1e-6


def leaf(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def check(f, tensors, tol=GRAD_TOL):
    err = T.finite_diff_check(f, tensors, eps=1e-5)
    assert err <= tol, err


class TestForward:
    def test_matmul_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.values, [[3, 4], [5, 6]])

    def test_matmul_row_by_column(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).values.tolist() == [[11]]

    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\) x \(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_broadcast_add_row(self):
        m = Tensor([[1, 1], [2, 2]])
        np.testing.assert_array_equal(T.broadcast_add_row(m, Tensor([0, 0])).values, [[1, 1], [2, 2]])
        np.testing.assert_array_equal(T.broadcast_add_row(m, Tensor([10, 20])).values, [[11, 21], [12, 22]])
        with pytest.raises(DimensionError):
            T.broadcast_add_row(m, Tensor([1, 2, 3]))

    def test_activations_at_zero(self):
        assert T.activation("sigmoid", Tensor([0.0])).values[0] == 0.5
        assert T.activation("tanh", Tensor([0.0])).values[0] == 0.0
        assert T.activation("relu", Tensor([-3.0, 2.0])).values.tolist() == [0.0, 2.0]

    def test_sigmoid_stable_for_large_negative(self):
        y = T.sigmoid(Tensor([-1000.0, 1000.0])).values
        assert np.isfinite(y).all()
        assert y[0] == 0.0 and y[1] == 1.0

    def test_softmax_uniform_and_stability(self):
        np.testing.assert_array_equal(T.softmax_rows(Tensor([0, 0, 0, 0])).values, [0.25] * 4)
        y = T.softmax_rows(Tensor([1000.0, 0.0])).values
        assert np.isfinite(y).all()
        assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)

    def test_softmax_column_shape(self):
        y = T.softmax_rows(Tensor([[1.0], [2.0], [3.0]]))
        assert y.shape == (3, 1)
        assert y.values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_mean_rows_concat_embedding(self):
        assert T.mean_rows(Tensor([[2, 4], [4, 6]])).values.tolist() == [3, 5]
        assert T.concat(Tensor([1, 2]), Tensor([3])).values.tolist() == [1, 2, 3]
        E = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        row = T.embedding_lookup(E, 0)
        assert row.values.tolist() == [0, 1]
        T.sum_all(row).backward()
        np.testing.assert_array_equal(E.grad, [[1, 1], [0, 0], [0, 0]])

    def test_embedding_out_of_range(self):
        with pytest.raises(VocabularyError):
            T.embedding_lookup(Tensor(np.ones((3, 2))), 3)

    def test_nonpositive_shape_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((0, 3)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.sum_all(x * x).backward()
        np.testing.assert_array_equal(x.grad, [2, -4, 6])

    def test_fan_out_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))
        T.sum_all(y).backward()
        assert x.grad.tolist() == [7.0]

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            T.scale(x, 2.0).backward()

    def test_backward_twice_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_all(x * x)
        loss.backward()
        with pytest.raises(ContractError, match="already"):
            loss.backward()

    def test_record_is_topological_and_visited_once(self, rng):
        visits = []
        x = leaf(rng, 3)
        rec = T.new_record()
        y = T.tanh(T.mul(x, x))
        z = T.sum_all(T.add(y, y))
        for node in rec.nodes:
            assert all(inp.node is None or inp.node.index < node.index for inp in node.inputs)
            fn = node.backward_fn
            node.backward_fn = (lambda f, i: (lambda g: (visits.append(i), f(g))[1]))(fn, node.index)
        z.backward()
        assert sorted(visits) == list(range(4))
        assert len(set(visits)) == len(visits)

    def test_replay_bit_identical(self, rng):
        def run():
            r = np.random.default_rng(7)
            a, b = leaf(r, 4, 3), leaf(r, 3, 1)
            T.new_record()
            loss = T.sum_all(T.softmax_rows(T.reshape(T.tanh(T.matmul(a, b)), (4, 1))) * Tensor(r.normal(size=(4, 1))))
            loss.backward()
            return a.grad.tobytes(), b.grad.tobytes()

        assert run() == run()

    def test_distinct_threads_distinct_records(self):
        results = {}

        def work(tag, scale):
            x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
            T.new_record()
            for _ in range(200):
                loss = T.sum_all(T.scale(x * x, scale))
            loss.backward()
            results[tag] = x.grad.copy()

        threads = [threading.Thread(target=work, args=(i, float(i + 1))) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(4):
            np.testing.assert_array_equal(results[i], 2 * (i + 1) * np.array([1.0, 2.0, 3.0]))


class TestGradients:
    """Every differentiable op against central differences, eps = 1e-5."""

    def test_matmul(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        w = Tensor(rng.normal(size=(3, 2)))
        check(lambda: T.sum_all(T.mul(T.matmul(a, b), w)), [a, b])

    def test_matmul_vector(self, rng):
        a, b = leaf(rng, 4), leaf(rng, 4, 3)
        w = Tensor(rng.normal(size=3))
        check(lambda: T.sum_all(T.mul(T.matmul(a, b), w)), [a, b])

    def test_matmul_against_independent_oracle(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        w = rng.normal(size=(3, 2))
        T.new_record()
        T.sum_all(T.mul(T.matmul(a, b), Tensor(w))).backward()
        num = central_difference(lambda: float(((a.values @ b.values) * w).sum()), a.values)
        np.testing.assert_allclose(a.grad, num, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(a.grad, w @ b.values.T, rtol=1e-12)

    def test_broadcast_add_row(self, rng):
        m, r = leaf(rng, 5, 3), leaf(rng, 3)
        w = Tensor(rng.normal(size=(5, 3)))
        check(lambda: T.sum_all(T.mul(T.broadcast_add_row(m, r), w)), [m, r])

    @pytest.mark.parametrize("kind", ["tanh", "sigmoid", "relu"])
    def test_activation(self, rng, kind):
        x = leaf(rng, 4, 4)
        if kind == "relu":
            # keep away from the kink
            x.values[np.abs(x.values) < 1e-3] = 0.5
        w = Tensor(rng.normal(size=(4, 4)))
        check(lambda: T.sum_all(T.mul(T.activation(kind, x), w)), [x])

    def test_softmax_jvp(self, rng):
        x = leaf(rng, 7)
        w = Tensor(rng.normal(size=7))
        check(lambda: T.sum_all(T.mul(T.softmax_rows(x), w)), [x])

    def test_log_softmax(self, rng):
        x = leaf(rng, 6)
        check(lambda: T.pick(T.log_softmax(x), 2), [x])

    def test_mul_mean_concat_embedding_slice(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        E = leaf(rng, 5, 2)
        w = Tensor(rng.normal(size=9))

        def f():
            m = T.mean_rows(T.mul(a, b))
            v = T.concat(m, T.embedding_lookup(E, 3), T.slice1d(T.mean_rows(a), 1, 4))
            return T.sum_all(T.mul(v, w))

        check(f, [a, b, E])

    def test_transpose_reshape_sub(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 6)
        w = Tensor(rng.normal(size=(3, 2)))
        check(lambda: T.sum_all(T.mul(T.sub(T.transpose(a), T.reshape(b, (3, 2))), w)), [a, b])

    def test_sigmoid_composition_ten_scalars(self, rng):
        x = leaf(rng, 10)
        check(lambda: T.sum_all(T.sigmoid(T.scale(T.sigmoid(x), 3.0))), [x])


class TestFiniteDiffCheck:
    def test_linear_is_exact(self, rng):
        x = leaf(rng, 5)
        w = Tensor(rng.normal(size=5))
        assert T.finite_diff_check(lambda: T.sum_all(T.mul(x, w)), [x]) < 1e-9

    def test_detects_corrupted_gradient(self, rng):
        x = leaf(rng, 10)

        def f():
            return T.sum_all(T.sigmoid(x))

        s = 1 / (1 + np.exp(-x.values))
        good = s * (1 - s)
        assert T.finite_diff_check(f, [x], analytic=[good]) < 1e-6
        assert T.finite_diff_check(f, [x], analytic=[good + 0.1]) > 1e-2


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_simplex(x):
    y = T.softmax_rows(Tensor(x)).values
    assert (y >= 0).all()
    assert abs(y.sum() - 1.0) <= 1e-12
