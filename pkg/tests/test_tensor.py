"""Tensor core: primitive semantics, gradients against finite differences,
tape invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lifthead import tensor as T
from lifthead.gradcheck import check_op, numeric_grad, primitive_checks, rel_error


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        m = T.matmul(t64(np.eye(2)), t64([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(m.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_shape_law(self):
        out = T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((3, 4))))
        assert out.shape == (2, 4)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))

    def test_grad_matches_finite_differences(self):
        err = primitive_checks(seed=3)["matmul"](0.0)
        assert err < 1e-6


class TestSoftmaxRows:
    def test_zero_row_uniform(self):
        out = T.softmax_rows(t64(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 5))
        a = T.softmax_rows(t64(x)).data
        b = T.softmax_rows(t64(x + 37.5)).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        assert (a.argmax(axis=1) == b.argmax(axis=1)).all()

    def test_large_logit_stays_finite(self):
        out = T.softmax_rows(t64([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        # 64-bit oracle with max subtraction: exp(0)=1, exp(-1000) underflows
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)

    @given(arrays(np.float64, (2, 6), elements=st.floats(-50, 50)))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, x):
        out = T.softmax_rows(T.Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert (out.data >= 0).all()


class TestLayerNorm:
    def test_constant_row_zeros(self):
        x = t64(np.full((2, 4), 3.7))
        out = T.layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)), eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized(self):
        out = T.layer_norm(t64([[1.0, -1.0]]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-14)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_row_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 64))
        out = T.layer_norm(t64(x), t64(np.ones(64)), t64(np.zeros(64)), eps=1e-8)
        assert abs(out.data.mean()) < 1e-6
        assert abs(out.data.var() - 1.0) < 1e-4


class TestElementwiseAndStructural:
    def test_relu(self):
        out = T.relu(t64([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_concat_shape_law(self):
        h, m, d = 4, 3, 8
        parts = [t64(np.zeros((m, d // h))) for _ in range(h)]
        assert T.concat_last_dim(parts).shape == (m, d)

    def test_add_gradient_passthrough(self):
        a, b = t64(np.ones((2, 2)), grad=True), t64(np.ones((2, 2)), grad=True)
        with T.Tape() as tape:
            loss = T.sum_(T.add(a, b))
        T.backward(loss, tape)
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2)))

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(t64(np.zeros((2, 2))), t64(np.zeros((3, 2))))

    def test_slice_rows_values_and_grad(self):
        x = t64(np.arange(12.0).reshape(4, 3), grad=True)
        with T.Tape() as tape:
            loss = T.sum_(T.slice_rows(x, 1, 3))
        T.backward(loss, tape)
        expected = np.zeros((4, 3))
        expected[1:3] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_gather_rows_repeats_accumulate(self):
        x = t64(np.eye(3), grad=True)
        with T.Tape() as tape:
            loss = T.sum_(T.gather_rows(x, [0, 0, 2]))
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [[2, 2, 2], [0, 0, 0], [1, 1, 1]])


class TestDropout:
    def test_p_zero_identity_both_modes(self):
        x = t64(np.arange(6.0).reshape(2, 3))
        rng = np.random.default_rng(0)
        for training in (True, False):
            out = T.dropout(x, 0.0, rng, training=training)
            np.testing.assert_array_equal(out.data, x.data)

    def test_eval_identity_any_p(self):
        x = t64(np.arange(6.0).reshape(2, 3))
        out = T.dropout(x, 0.9, np.random.default_rng(0), training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_invalid_probability(self):
        x = t64(np.zeros((2, 2)))
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="probability"):
                T.dropout(x, p, np.random.default_rng(0), training=True)

    def test_survivor_statistics(self):
        rng = np.random.default_rng(42)
        x = T.Tensor(np.ones((100, 1000)) * 2.0, dtype=np.float64)
        out = T.dropout(x, 0.1, rng, training=True)
        survivors = (out.data != 0).mean()
        assert abs(survivors - 0.9) < 0.01
        assert abs(out.data.mean() - x.data.mean()) / x.data.mean() < 0.02


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.zeros((3, 2)), grad=True)
        with T.Tape() as tape:
            loss = T.sum_(x)
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_matmul_sum_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a_val, b_val = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 4))
        a, b = t64(a_val, grad=True), t64(b_val, grad=True)
        with T.Tape() as tape:
            loss = T.sum_(T.matmul(a, b))
        T.backward(loss, tape)

        num_a = numeric_grad(lambda v: (v @ b_val).sum(), a_val)
        num_b = numeric_grad(lambda v: (a_val @ v).sum(), b_val)
        assert rel_error(a.grad, num_a) < 1e-6
        assert rel_error(b.grad, num_b) < 1e-6

    def test_non_scalar_loss_rejected(self):
        x = t64(np.zeros((2, 2)), grad=True)
        with T.Tape() as tape:
            y = T.relu(x)
        with pytest.raises(T.NonScalarLossError):
            T.backward(y, tape)

    def test_accumulation_is_exactly_double(self):
        x = t64(np.arange(4.0).reshape(2, 2), grad=True)
        with T.Tape() as tape:
            loss = T.sum_(T.scale(x, 3.0))
        T.backward(loss, tape)
        once = x.grad.copy()
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_reused_intermediate_accumulates(self):
        # y used twice: d(sum(y*y + y))/dx must see both paths
        x = t64([[0.5, -0.3]], grad=True)
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
            loss = T.sum_(T.add(T.mul(y, y), y))
        T.backward(loss, tape)
        expected = 2.0 * (2.0 * 2.0 * x.data) + 2.0  # d/dx (4x^2 + 2x)
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)

    def test_no_tape_no_tracking(self):
        x = t64(np.ones((2, 2)), grad=True)
        y = T.relu(x)
        assert y._tape is None


class TestFiniteDifferenceContract:
    @pytest.mark.parametrize("name", sorted(primitive_checks(seed=11).keys()))
    def test_primitive(self, name):
        err = primitive_checks(seed=11)[name](0.0)
        assert err < 1e-6, f"{name}: rel err {err:.3e}"

    def test_fault_injection_detected(self):
        err = primitive_checks(seed=11)["matmul"](0.01)
        assert err > 1e-6


class TestDeterminism:
    def test_dropout_bit_identical_same_seed(self):
        x = T.Tensor(np.random.default_rng(1).normal(size=(8, 8)))
        a = T.dropout(x, 0.3, np.random.default_rng(99), training=True)
        b = T.dropout(x, 0.3, np.random.default_rng(99), training=True)
        np.testing.assert_array_equal(a.data, b.data)

    def test_ops_bit_identical_across_runs(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 5))
        a = T.softmax_rows(T.Tensor(x)).data
        b = T.softmax_rows(T.Tensor(x)).data
        np.testing.assert_array_equal(a, b)


class TestNormalizeRows:
    def test_unit_norm(self):
        rng = np.random.default_rng(3)
        out = T.normalize_rows(t64(rng.normal(size=(5, 2))))
        np.testing.assert_allclose((out.data ** 2).sum(axis=1), 1.0, atol=1e-12)

    def test_near_zero_row_epsilon_path(self):
        x = t64([[1e-12, 0.0]])
        out = T.normalize_rows(x, eps=1e-8)
        np.testing.assert_allclose(out.data, [[1e-4, 0.0]], atol=1e-18)

    def test_epsilon_branch_gradient(self):
        err = check_op(
            lambda t: T.sum_(T.normalize_rows(t[0], eps=1.0)),
            [np.array([[1e-3, -2e-3]])])
        assert err < 1e-6
