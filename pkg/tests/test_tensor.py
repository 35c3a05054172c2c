import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egotr import tensor as T
from egotr.exceptions import DimensionError, NonFiniteError, UsageError
from egotr.tensor import Tensor, finite_diff_grad
from oracles import rel_err

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


class TestConstruction:
    def test_rejects_zero_dim(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, float("nan")])

    def test_int_promoted_to_float64(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_float32_kept(self):
        assert Tensor(np.ones(2, np.float32)).dtype == np.float32

    def test_overflow_in_op_is_reported(self):
        with pytest.raises(NonFiniteError):
            T.exp(Tensor([1000.0]))


class TestMatmul:
    A = [[1.0, 2.0], [3.0, 4.0]]

    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor(self.A))
        np.testing.assert_array_equal(out.data, self.A)

    def test_zero(self):
        out = T.matmul(Tensor(self.A), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_worked_example(self):
        b = [[5.0, 6.0], [7.0, 8.0]]
        expected = naive_matmul(self.A, b)
        assert expected == [[19, 22], [43, 50]]
        np.testing.assert_array_equal(T.matmul(Tensor(self.A), Tensor(b)).data, expected)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batch_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 4))))

    def test_needs_2d(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_matches_loop_oracle(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data,
                                   naive_matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-12)

    def test_batched_shared_weight_gradient(self):
        rng = np.random.default_rng(0)
        x = leaf(rng.standard_normal((2, 3, 4)))
        w = leaf(rng.standard_normal((4, 5)))
        T.backward(T.sum(T.matmul(x, w) * T.matmul(x, w)))
        f = lambda _: T.sum(T.matmul(x, w) * T.matmul(x, w))  # noqa: E731
        assert rel_err(w.grad, finite_diff_grad(f, w)) < 1e-6
        assert rel_err(x.grad, finite_diff_grad(f, x)) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_saturation(self):
        np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)

    def test_log2(self):
        np.testing.assert_allclose(T.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3],
                                   rtol=1e-14)

    def test_bad_axis(self):
        with pytest.raises(UsageError):
            T.softmax(Tensor(np.ones((2, 2))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        p = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert (p >= 0).all() and (p <= 1).all()


class TestLayerNorm:
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))

    def test_constant_row(self):
        out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), self.ones, self.zeros)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 3))), self.ones, self.zeros)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(-100, 100))
    def test_shift_invariance(self, x, c):
        x = x + np.arange(4)  # avoid degenerate rows
        a = T.layer_norm(Tensor(x), self.ones, self.zeros).data
        b = T.layer_norm(Tensor(x + c), self.ones, self.zeros).data
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_row_moments(self):
        x = np.random.default_rng(1).standard_normal((10, 16)) * 3 + 2
        out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.abs(out.mean(-1)).max() <= 1e-6
        assert np.abs(out.var(-1) - 1).max() <= 1e-4


class TestGelu:
    @pytest.mark.parametrize("x, expected", [(0.0, 0.0), (10.0, 10.0), (-10.0, 0.0)])
    def test_values(self, x, expected):
        assert abs(T.gelu(Tensor([x])).data[0] - expected) <= 1e-6

    def test_matches_closed_form(self):
        x = np.linspace(-4, 4, 41)
        ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-12, atol=1e-15)


class TestBackward:
    def test_sum(self):
        x = leaf([1.0, 2.0, 3.0])
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = leaf([1.0, 2.0])
        T.backward(T.sum(x * x))
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_non_scalar(self):
        with pytest.raises(UsageError):
            T.backward(leaf([1.0, 2.0]) * 2)

    def test_accumulates_across_calls(self):
        x = leaf([1.0, 2.0])
        T.backward(T.sum(x * x))
        T.backward(T.sum(x * x))
        np.testing.assert_array_equal(x.grad, [4, 8])

    def test_fan_out_sums_exactly(self):
        rng = np.random.default_rng(3)
        x = leaf(rng.standard_normal(5))
        T.backward(T.sum(T.exp(x)))
        gf = x.grad.copy()
        x.zero_grad()
        T.backward(T.sum(x * x * x))
        gg = x.grad.copy()
        x.zero_grad()
        T.backward(T.sum(T.exp(x)) + T.sum(x * x * x))
        np.testing.assert_array_equal(x.grad, gf + gg)

    def test_tape_is_topological(self):
        x = leaf([1.0, 2.0])
        y = T.exp(x)
        z = y * y + x
        tape = T.Tape.from_output(T.sum(z))
        seen = set()
        for node in tape:
            for inp in node._node.inputs if node._node else ():
                if inp._node is not None:
                    assert id(inp) in seen
            seen.add(id(node))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_random_composite_graph(self):
        rng = np.random.default_rng(7)
        x = leaf(rng.standard_normal((3, 4)))
        w = leaf(rng.standard_normal((4, 4)))

        def f(_):
            h = T.gelu(T.matmul(x, w))
            h = T.layer_norm(h, Tensor(np.ones(4)), Tensor(np.zeros(4)))
            return T.sum(T.softplus(T.softmax(h, -1) * 3.0 - T.sqrt(x * x + 1.0)))

        T.backward(f(None))
        assert rel_err(x.grad, finite_diff_grad(f, x)) <= 1e-4
        assert rel_err(w.grad, finite_diff_grad(f, w)) <= 1e-4


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal(6))
        np.testing.assert_allclose(finite_diff_grad(T.sum, x), np.ones(6), atol=1e-9)

    def test_square_at_three(self):
        x = Tensor([3.0])
        assert abs(finite_diff_grad(lambda t: T.sum(t * t), x, h=1e-5)[0] - 6.0) <= 1e-8

    def test_needs_float64(self):
        with pytest.raises(UsageError):
            finite_diff_grad(T.sum, Tensor(np.ones(2, np.float32)))

    def test_restores_input(self):
        x = Tensor([1.0, 2.0])
        finite_diff_grad(lambda t: T.sum(t * t), x)
        np.testing.assert_array_equal(x.data, [1.0, 2.0])


UNARY = {
    "exp": T.exp,
    "log": lambda t: T.log(t * t + 1.0),
    "sqrt": lambda t: T.sqrt(t * t + 1.0),
    "gelu": T.gelu,
    "softplus": lambda t: T.softplus(t * 4.0),
    "softmax": lambda t: T.softmax(t, -1),
    "l2_normalize": T.l2_normalize,
    "transpose": lambda t: T.transpose(t, (1, 0)) * Tensor(np.arange(12.0).reshape(4, 3)),
    "take": lambda t: T.take(t, (np.array([0, 0, 2]), np.array([1, 1, 3]))),
    "mean": lambda t: T.mean(t, axis=0) * Tensor(np.arange(4.0)),
    "concat": lambda t: T.concat([t, t * 2.0], axis=1),
    "div": lambda t: t / (t * t + 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((3, 4)))
    weights = Tensor(rng.standard_normal(UNARY[name](x).shape))

    def f(_):
        return T.sum(UNARY[name](x) * weights)

    T.backward(f(None))
    assert rel_err(x.grad, finite_diff_grad(f, x)) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("stride, padding", [(1, 0), (2, 1)])
def test_conv2d_gradients(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((2, 2, 5, 6)))
    w = leaf(rng.standard_normal((3, 2, 3, 3)))
    b = leaf(rng.standard_normal(3))
    probe = None

    def f(_):
        out = T.conv2d(x, w, b, stride=stride, padding=padding)
        return T.sum(out * probe)

    probe = Tensor(rng.standard_normal(T.conv2d(x, w, b, stride, padding).shape))
    T.backward(f(None))
    for p in (x, w, b):
        assert rel_err(p.grad, finite_diff_grad(f, p)) <= 1e-4


def test_conv2d_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_broadcast_add_gradient_reduces(a, b):
    ta, tb = leaf(a), leaf(b)
    T.backward(T.sum(ta + tb))
    np.testing.assert_array_equal(ta.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(tb.grad, np.full(3, 2.0))


def test_count_macs():
    with T.count_macs() as counter:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert counter.total == 24
