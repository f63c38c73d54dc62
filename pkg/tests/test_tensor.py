import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milkt import tensor as T
from milkt.tensor import Tape, backward, finite_difference_gradient, relative_error


def scalar_fn(build):
    """Wrap ``build(tape, node) -> 1x1 node`` as a plain function of a matrix."""
    def f(x):
        tape = Tape()
        return build(tape, tape.constant(x)).value[0, 0]
    return f


def analytic_grad(build, x):
    tape = Tape()
    leaf = tape.param(np.array(x, dtype=float))
    out = build(tape, leaf)
    backward(tape, out)
    return leaf.grad


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        M = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = T.matmul(tape.constant(np.eye(2)), tape.constant(M))
        np.testing.assert_array_equal(out.value, M)

    def test_hand_product(self):
        tape = Tape()
        out = T.matmul(tape.constant([[1, 2]]), tape.constant([[3], [4]]))
        assert out.value.tolist() == [[11.0]]

    def test_shape_error_names_shapes(self):
        tape = Tape()
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))

    def test_backward_vs_fd(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        build = lambda tape, x: T.sum_all(T.matmul(x, tape.constant(b)))
        num = finite_difference_gradient(scalar_fn(build), a)
        assert relative_error(analytic_grad(build, a), num) < 1e-6
        build_b = lambda tape, x: T.sum_all(T.matmul(tape.constant(a), x))
        num_b = finite_difference_gradient(scalar_fn(build_b), b)
        assert relative_error(analytic_grad(build_b, b), num_b) < 1e-6

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r, k, j, c = rng.integers(1, 6, size=4)
            A, B, C = (rng.normal(size=s) for s in ((r, k), (k, j), (j, c)))
            tape = Tape()
            a, b, cn = tape.constant(A), tape.constant(B), tape.constant(C)
            left = T.matmul(T.matmul(a, b), cn).value
            right = T.matmul(a, T.matmul(b, cn)).value
            np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


class TestElementwise:
    def test_closed_forms(self):
        tape = Tape()
        assert T.sigmoid(tape.constant(0.0)).value[0, 0] == 0.5
        assert T.tanh(tape.constant(0.0)).value[0, 0] == 0.0
        assert T.pow_const(tape.constant([[8.0]]), 1 / 3).value[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_sigmoid_extremes_stay_finite(self):
        tape = Tape()
        y = T.sigmoid(tape.constant([[-1000.0, 1000.0]])).value
        assert np.all(np.isfinite(y))
        assert y.tolist() == [[0.0, 1.0]]

    def test_pow_negative_base_rejected(self):
        tape = Tape()
        with pytest.raises(T.DomainError):
            T.pow_const(tape.constant([[-8.0]]), 1 / 3)
        # integer exponents are fine on negative bases
        assert T.pow_const(tape.constant([[-2.0]]), 3).value[0, 0] == -8.0

    def test_pow_gradient_at_zero_is_finite(self):
        g = analytic_grad(lambda tape, x: T.sum_all(T.pow_const(x, 1 / 3)), [[0.0, 1.0]])
        assert np.all(np.isfinite(g))

    def test_sign_has_zero_gradient(self):
        g = analytic_grad(lambda tape, x: T.sum_all(T.sign(x)), [[-1.0, 2.0]])
        assert g.tolist() == [[0.0, 0.0]]

    def test_binary_shape_mismatch(self):
        tape = Tape()
        a, b = tape.constant(np.ones((1, 2))), tape.constant(np.ones((2, 1)))
        for op in (T.add, T.sub, T.hadamard, T.rss_loss):
            with pytest.raises(T.ShapeError):
                op(a, b)

    def test_dropout_eval_is_identity(self):
        tape = Tape()
        x = tape.constant(np.arange(6.0).reshape(2, 3))
        assert T.dropout(x, 0.25, False, None) is x

    def test_dropout_train_scales_kept_units(self):
        tape = Tape()
        x = tape.constant(np.ones((50, 40)))
        y = T.dropout(x, 0.25, True, np.random.default_rng(0)).value
        assert set(np.unique(y)) <= {0.0, 1 / 0.75}
        assert abs(np.mean(y == 0) - 0.25) < 0.03


UNARY = {
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "abs": T.abs_,
    "scale_const": lambda x: T.scale_const(x, -2.5),
    "softmax_row": T.softmax_row,
    "transpose": T.transpose,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_at_random_points(name):
    op = UNARY[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        # keep away from the kinks of relu/abs
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        w = rng.normal(size=(4, 3) if name == "transpose" else (3, 4))
        build = lambda tape, n: T.sum_all(T.hadamard(op(n), tape.constant(w)))
        num = finite_difference_gradient(scalar_fn(build), x)
        assert relative_error(analytic_grad(build, x), num) < 1e-5


def test_binary_gradients_at_random_points():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        for op in (T.add, T.sub, T.hadamard):
            build = lambda tape, n: T.sum_all(T.hadamard(op(n, tape.constant(b)), tape.constant(w)))
            num = finite_difference_gradient(scalar_fn(build), a)
            assert relative_error(analytic_grad(build, a), num) < 1e-5


def test_pow_and_add_row_gradients():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(0.2, 3.0, size=(2, 3))
        build = lambda tape, n: T.sum_all(T.pow_const(n, 1 / 3))
        num = finite_difference_gradient(scalar_fn(build), x)
        assert relative_error(analytic_grad(build, x), num) < 1e-5
        M, W = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        build_r = lambda tape, r: T.sum_all(T.hadamard(T.add_row(tape.constant(M), r), tape.constant(W)))
        r = rng.normal(size=(1, 3))
        num_r = finite_difference_gradient(scalar_fn(build_r), r)
        assert relative_error(analytic_grad(build_r, r), num_r) < 1e-5


class TestSoftmax:
    def test_closed_forms(self):
        tape = Tape()
        np.testing.assert_array_equal(T.softmax_row(tape.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])
        y = T.softmax_row(tape.constant([[math.log(2), 0.0]])).value
        np.testing.assert_allclose(y, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        tape = Tape()
        y = T.softmax_row(tape.constant(rng.normal(scale=5, size=(100, 7)))).value
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((y > 0) & (y < 1))

    def test_large_inputs_are_stable(self):
        tape = Tape()
        y = T.softmax_row(tape.constant([[1000.0, 1001.0]])).value
        assert np.all(np.isfinite(y))


class TestConcatRows:
    def test_single_row_unchanged(self):
        tape = Tape()
        r = tape.constant([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(T.concat_rows([r]).value, r.value)

    def test_eight_heads_of_width_512(self):
        tape = Tape()
        out = T.concat_rows([tape.constant(np.full((1, 512), i)) for i in range(8)])
        assert out.shape == (8, 512)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_round_trip(self, m, d, seed):
        rng = np.random.default_rng(seed)
        rows = [rng.normal(size=(1, d)) for _ in range(m)]
        tape = Tape()
        out = T.concat_rows([tape.constant(r) for r in rows]).value
        for j, r in enumerate(rows):
            np.testing.assert_array_equal(out[j:j + 1], r)

    def test_mixed_widths_rejected(self):
        tape = Tape()
        with pytest.raises(T.ShapeError):
            T.concat_rows([tape.constant(np.ones((1, 2))), tape.constant(np.ones((1, 3)))])

    def test_gradient_routes_rows(self):
        tape = Tape()
        rows = [tape.param(np.ones((1, 2))) for _ in range(3)]
        w = tape.constant([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        backward(tape, T.sum_all(T.hadamard(T.concat_rows(rows), w)))
        assert [r.grad.tolist() for r in rows] == [[[1, 2]], [[3, 4]], [[5, 6]]]


class TestLosses:
    def test_rss_values(self):
        tape = Tape()
        x = tape.constant([[0.3, -1.0]])
        assert T.rss_loss(x, x).value[0, 0] == 0.0
        assert T.rss_loss(tape.constant([[1.0, 2.0]]), tape.constant([[0.0, 0.0]])).value[0, 0] == 5.0

    def test_rss_symmetric_and_gradient(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
        tape = Tape()
        assert T.rss_loss(tape.constant(a), tape.constant(b)).value == T.rss_loss(
            tape.constant(b), tape.constant(a)).value
        build = lambda tape, x: T.rss_loss(x, tape.constant(b))
        g = analytic_grad(build, a)
        np.testing.assert_allclose(g, 2 * (a - b), rtol=1e-14)
        assert relative_error(g, finite_difference_gradient(scalar_fn(build), a)) < 1e-6

    def test_cross_entropy(self):
        tape = Tape()
        assert T.cross_entropy_loss(tape.constant([[1.0, 0.0]]), 0).value[0, 0] == 0.0
        assert T.cross_entropy_loss(tape.constant([[0.5, 0.5]]), 0).value[0, 0] == pytest.approx(
            0.693147, abs=1e-6)
        hi = T.cross_entropy_loss(tape.constant([[0.1, 0.9]]), 1).value[0, 0]
        lo = T.cross_entropy_loss(tape.constant([[0.5, 0.5]]), 1).value[0, 0]
        assert hi < lo

    def test_cross_entropy_clamps_zero(self):
        tape = Tape()
        v = T.cross_entropy_loss(tape.constant([[1.0, 0.0]]), 1).value[0, 0]
        assert v == pytest.approx(-math.log(1e-12))

    def test_cross_entropy_bad_class(self):
        tape = Tape()
        with pytest.raises(IndexError):
            T.cross_entropy_loss(tape.constant([[0.5, 0.5]]), 2)


class TestBackward:
    def test_square(self):
        g = analytic_grad(lambda tape, x: T.hadamard(x, x), [[3.0]])
        assert g[0, 0] == 6.0

    def test_constant_has_zero_gradient(self):
        tape = Tape()
        x = tape.param(np.array([[2.0]]))
        out = T.add(tape.constant([[5.0]]), T.scale_const(x, 0.0))
        backward(tape, out)
        assert x.grad[0, 0] == 0.0

    def test_non_scalar_rejected(self):
        tape = Tape()
        with pytest.raises(T.ShapeError):
            backward(tape, tape.param(np.ones((1, 2))))

    def test_repeated_calls_accumulate(self):
        tape = Tape()
        x = tape.param(np.array([[3.0]]))
        y = T.hadamard(x, x)
        backward(tape, y)
        backward(tape, y)
        assert x.grad[0, 0] == 12.0
        tape.zero_grad()
        backward(tape, y)
        assert x.grad[0, 0] == 6.0

    def test_shared_parameter_accumulates(self):
        tape = Tape()
        w = np.array([[2.0]])
        a = tape.param(w)
        assert tape.param(w) is a
        backward(tape, T.add(a, T.hadamard(a, a)))
        assert tape.grad_of(w)[0, 0] == 1.0 + 4.0

    def test_tape_is_topological(self):
        tape = Tape()
        x = tape.param(np.ones((2, 2)))
        T.sum_all(T.tanh(T.matmul(x, x)))
        for node in tape.nodes:
            assert all(p.index < node.index for p in node.parents)
            assert node.grad.shape == node.value.shape

    def test_replay_is_bitwise_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 4))

        def run():
            tape = Tape()
            n = tape.param(x.copy())
            out = T.sum_all(T.softmax_row(T.tanh(T.matmul(n, n))))
            backward(tape, out)
            return out.value.tobytes(), n.grad.tobytes()

        assert run() == run()


class TestFiniteDifference:
    def test_square(self):
        g = finite_difference_gradient(lambda x: x[0, 0] ** 2, np.array([[3.0]]))
        assert abs(g[0, 0] - 6.0) < 1e-6

    def test_linear_is_exact(self):
        w = np.array([[0.5, -2.0, 4.0]])
        g = finite_difference_gradient(lambda x: float(np.sum(w * x)), np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(g, w, rtol=1e-10)

    def test_sum_of_squares(self):
        g = finite_difference_gradient(lambda x: float(np.sum(x * x)), np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(g, [[2.0, 4.0]], atol=1e-6)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda x: 0.0, np.ones((1, 1)), h=0.0)


def test_as_matrix_rejects_empty():
    with pytest.raises(T.ShapeError):
        T.as_matrix(np.zeros((0, 3)))
