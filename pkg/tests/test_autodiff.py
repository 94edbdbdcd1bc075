import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import assert_gradients_close
from linkrecon.autodiff import NonFiniteError, NotPositiveDefiniteError, Tape, as_matrix, finite_diff_check


def grad_of(build, **params):
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.items()}
    return tape.backward(build(tape, leaves))


def random_spd(rng, n):
    x = rng.normal(size=(n, n))
    return x @ x.T + n * np.eye(n)


seeds = st.integers(0, 2**31 - 1)


class TestMatmul:
    def test_identity(self):
        t = Tape()
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(t.matmul(t.constant(np.eye(2)), t.constant(x)).value, x)

    def test_small(self):
        t = Tape()
        out = t.matmul(t.constant([[1.0, 2.0], [3.0, 4.0]]), t.constant(np.eye(2)))
        np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))

    @given(seeds)
    def test_gradient_5x4_4x3(self, seed):
        rng = np.random.default_rng(seed)
        params = {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(4, 3))}
        assert_gradients_close(lambda t, v: t.sum(t.matmul(v["a"], v["b"])), params)

    def test_gradient_5x4_4x3_relative(self):
        rng = np.random.default_rng(11)
        params = {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(4, 3))}
        assert finite_diff_check(lambda t, v: t.sum(t.matmul(v["a"], v["b"])), params) < 1e-6

    def test_single_column_path(self):
        rng = np.random.default_rng(0)
        params = {"a": rng.normal(size=(6, 3)), "b": rng.normal(size=(3, 1))}
        assert finite_diff_check(lambda t, v: t.sum(t.sigmoid(t.matmul(v["a"], v["b"]))), params) < 1e-6


class TestSpdInverse:
    def test_identity(self):
        t = Tape()
        np.testing.assert_allclose(t.spd_inverse(t.constant(np.eye(4))).value, np.eye(4))

    def test_diagonal(self):
        t = Tape()
        np.testing.assert_allclose(t.spd_inverse(t.constant(np.diag([2.0, 4.0]))).value, np.diag([0.5, 0.25]))

    @given(seeds, st.integers(1, 8))
    def test_residual_and_symmetry(self, seed, n):
        m = random_spd(np.random.default_rng(seed), n)
        t = Tape()
        inv = t.spd_inverse(t.constant(m)).value
        np.testing.assert_allclose(inv @ m, np.eye(n), atol=1e-10)
        np.testing.assert_array_equal(inv, inv.T)

    @given(seeds)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 6))
        # eigenvalues of order one keep every gradient entry well above finite-difference noise
        m = np.eye(6) + 0.2 * x @ x.T / 6
        c = rng.normal(size=(6, 6))

        # perturbations of m stay symmetric through (x + x^T) / 2, matching the op's symmetrization
        def build(t, v):
            sym = t.scalar_mul(t.add(v["m"], t.transpose(v["m"])), 0.5)
            return t.sum(t.matmul(t.spd_inverse(sym), t.constant(c)))

        assert_gradients_close(build, {"m": m})

    def test_gradient_relative_6x6(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 6))
        m = np.eye(6) + 0.2 * x @ x.T / 6

        def build(t, v):
            sym = t.scalar_mul(t.add(v["m"], t.transpose(v["m"])), 0.5)
            return t.sum(t.spd_inverse(sym))

        assert finite_diff_check(build, {"m": m}) < 1e-6

    def test_not_positive_definite(self):
        t = Tape()
        with pytest.raises(NotPositiveDefiniteError):
            t.spd_inverse(t.constant(np.diag([1.0, -1.0])))

    def test_asymmetric_rejected(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.spd_inverse(t.constant([[2.0, 1.0], [0.0, 2.0]]))

    def test_rounding_drift_absorbed(self):
        m = random_spd(np.random.default_rng(1), 5)
        m[0, 1] += 1e-13
        t = Tape()
        inv = t.spd_inverse(t.constant(m)).value
        np.testing.assert_array_equal(inv, inv.T)


class TestElementwise:
    def test_sigmoid_zero(self):
        t = Tape()
        assert t.sigmoid(t.constant(0.0)).value[0, 0] == 0.5

    def test_relu(self):
        t = Tape()
        np.testing.assert_array_equal(t.relu(t.constant([-1.0, 2.0])).value, [[0.0, 2.0]])

    def test_dropout_rate_zero_is_identity(self):
        t = Tape()
        x = t.constant(np.arange(12.0).reshape(3, 4))
        np.testing.assert_array_equal(t.dropout(x, 0.0, 1, training=True).value, x.value)

    def test_dropout_inference_is_identity(self):
        t = Tape()
        x = t.constant(np.ones((4, 4)))
        np.testing.assert_array_equal(t.dropout(x, 0.5, 1, training=False).value, x.value)

    def test_dropout_scaling_and_seed(self):
        x = np.ones((200, 50))
        t = Tape()
        a = t.dropout(t.constant(x), 0.2, 42, True).value
        t2 = Tape()
        b = t2.dropout(t2.constant(x), 0.2, 42, True).value
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) == {0.0, 1.25}
        assert abs(a.mean() - 1.0) < 0.03

    def test_dropout_bad_rate(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.dropout(t.constant(1.0), 1.0, 0, True)

    @given(seeds)
    def test_elementwise_gradients(self, seed):
        rng = np.random.default_rng(seed)
        params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4)), "r": rng.normal(size=(1, 4))}

        def build(t, v):
            x = t.subtract(t.add(v["a"], t.scalar_mul(v["b"], 1.7)), v["b"])
            x = t.add_row(t.sigmoid(x), v["r"])
            return t.sum(t.matmul(x, t.transpose(v["a"])))

        assert_gradients_close(build, params)

    @given(seeds)
    def test_relu_gradient_away_from_kink(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.1, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
        g = grad_of(lambda t, v: t.sum(t.relu(v["a"])), a=a)["a"]
        np.testing.assert_array_equal(g, (a > 0).astype(float))

    def test_dropout_gradient_uses_mask(self):
        x = np.ones((5, 5))
        t = Tape()
        v = t.param("x", x)
        out = t.dropout(v, 0.5, 3, True)
        g = t.backward(t.sum(out))["x"]
        np.testing.assert_array_equal(g, out.value)


class TestShape:
    def test_concat_single(self):
        t = Tape()
        x = np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(t.concat_columns([t.constant(x)]).value, x)

    def test_concat_two(self):
        t = Tape()
        out = t.concat_columns([t.constant([[1.0], [2.0]]), t.constant([[3.0], [4.0]])])
        np.testing.assert_array_equal(out.value, [[1, 3], [2, 4]])

    def test_concat_gradient_is_ones(self):
        g = grad_of(
            lambda t, v: t.sum(t.concat_columns([v["p"], v["q"]])), p=np.zeros((3, 1)), q=np.zeros((3, 2))
        )
        np.testing.assert_array_equal(g["p"], np.ones((3, 1)))
        np.testing.assert_array_equal(g["q"], np.ones((3, 2)))

    def test_reshape_row_major(self):
        t = Tape()
        x = np.arange(9.0).reshape(3, 3)
        col = t.reshape(t.constant(x), 9, 1).value
        assert col[1 * 3 + 2, 0] == x[1, 2]

    @given(seeds)
    def test_reshape_concat_gradient(self, seed):
        rng = np.random.default_rng(seed)
        params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3, 3)), "w": rng.normal(size=(2, 1))}

        def build(t, v):
            f = t.concat_columns([t.reshape(v["a"], 9, 1), t.reshape(v["b"], 9, 1)])
            return t.sum(t.sigmoid(t.matmul(f, v["w"])))

        assert_gradients_close(build, params)


class TestTape:
    def test_sum_gradient_ones(self):
        g = grad_of(lambda t, v: t.sum(v["w"]), w=np.zeros((2, 2)))
        np.testing.assert_array_equal(g["w"], np.ones((2, 2)))

    def test_scalar_square(self):
        g = grad_of(lambda t, v: t.sum(t.matmul(v["w"], v["w"])), w=[[3.0]])
        assert g["w"][0, 0] == 6.0

    def test_unused_parameter_gets_zero_gradient(self):
        g = grad_of(lambda t, v: t.sum(v["a"]), a=np.ones((2, 2)), b=np.ones((1, 3)))
        np.testing.assert_array_equal(g["b"], np.zeros((1, 3)))

    def test_reused_value_accumulates(self):
        g = grad_of(lambda t, v: t.sum(t.add(v["a"], v["a"])), a=np.ones((2, 2)))
        np.testing.assert_array_equal(g["a"], 2 * np.ones((2, 2)))

    def test_single_use(self):
        t = Tape()
        w = t.param("w", 1.0)
        loss = t.sum(w)
        t.backward(loss)
        with pytest.raises(RuntimeError):
            t.backward(loss)
        with pytest.raises(RuntimeError):
            t.sum(w)

    def test_loss_must_be_scalar(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.backward(t.param("w", np.ones((2, 2))))

    def test_cross_tape_operand(self):
        a, b = Tape(), Tape()
        with pytest.raises(ValueError):
            a.add(a.constant(1.0), b.constant(1.0))

    def test_duplicate_param(self):
        t = Tape()
        t.param("w", 1.0)
        with pytest.raises(ValueError):
            t.param("w", 2.0)

    def test_non_finite_detected(self):
        t = Tape()
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            t.scalar_mul(t.constant(1e308), 10.0)

    def test_constants_get_no_gradient_work(self):
        t = Tape()
        c = t.matmul(t.constant(np.ones((2, 2))), t.constant(np.ones((2, 2))))
        assert not c.requires_grad and t.nodes[c.index].backward is None

    def test_json_dump(self):
        t = Tape()
        t.sum(t.matmul(t.param("w", np.ones((2, 3))), t.constant(np.ones((3, 1)))))
        rows = json.loads(t.to_json())
        assert [r["op"] for r in rows] == ["param", "const", "matmul", "sum"]
        assert rows[0]["name"] == "w" and rows[2]["shape"] == [2, 1]

    def test_as_matrix(self):
        assert as_matrix(3.0).shape == (1, 1) and as_matrix([1, 2]).shape == (1, 2)
        with pytest.raises(ValueError):
            as_matrix(np.ones((2, 2, 2)))


class TestFiniteDiffCheck:
    def test_sum_of_params_is_exact(self):
        assert finite_diff_check(lambda t, v: t.sum(v["w"]), {"w": np.ones((3, 3))}) < 1e-8

    def test_bce_of_fixed_logits(self):
        from linkrecon.training import bce_loss

        rng = np.random.default_rng(0)
        labels = (rng.random((4, 4)) < 0.5).astype(float)
        params = {"z": rng.normal(size=(4, 4))}
        assert finite_diff_check(lambda t, v: bce_loss(t.sigmoid(v["z"]), labels, t), params) < 1e-6

    def test_detects_wrong_gradient(self):
        def build(t, v):
            x = v["w"]
            # a deliberately wrong backward: claims d(2x)/dx = 1
            return t.sum(t.record("bad", 2 * x.value, (x,), lambda g: (g,)))

        assert finite_diff_check(build, {"w": np.ones((2, 2))}) > 0.1
