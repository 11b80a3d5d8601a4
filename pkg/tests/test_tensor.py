"""Unit tests for the autodiff core: forward semantics, tape contracts,
and finite-difference verification of every op's backward pass."""

import numpy as np
import pytest

from xfield import tensor as T
from xfield.errors import ContractError, NumericalError, ShapeError
from xfield.gradcheck import check_gradients
from xfield.tensor import Tape, Tensor


def t64(rng, *shape, trainable=True):
    return Tensor(rng.standard_normal(shape), trainable=trainable, dtype=np.float64)


class TestForwardSemantics:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((3, 5)).astype(np.float32)
        out = T.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_matmul_scalar_product(self):
        out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data.shape == (1, 1)
        assert out.item() == 6.0

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_softmax_constant_row(self):
        out = T.softmax(Tensor(np.full((1, 4), 7.0)), axis=-1)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_softmax_analytic(self):
        out = T.softmax(Tensor([[0.0, np.log(2.0)]], dtype=np.float64), axis=-1)
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = T.softmax(Tensor(rng.standard_normal((5, 9))), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_layer_norm_identity_on_normalized_row(self):
        row = np.array([[-1.5, -0.5, 0.5, 1.5]], dtype=np.float64)
        row = (row - row.mean()) / row.std()
        out = T.layer_norm(
            Tensor(row, dtype=np.float64),
            Tensor(np.ones(4), dtype=np.float64),
            Tensor(np.zeros(4), dtype=np.float64),
        )
        np.testing.assert_allclose(out.data, row, atol=1e-5)

    def test_layer_norm_constant_row_degenerate(self):
        out = T.layer_norm(
            Tensor(np.full((2, 6), 3.0), dtype=np.float64),
            Tensor(np.ones(6), dtype=np.float64),
            Tensor(np.zeros(6), dtype=np.float64),
        )
        np.testing.assert_allclose(out.data, 0.0, atol=1e-7)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((64, 32)).astype(np.float32))
        b = Tensor(rng.standard_normal((32, 16)).astype(np.float32))
        first = T.gelu(T.matmul(a, b)).data.copy()
        second = T.gelu(T.matmul(a, b)).data
        np.testing.assert_array_equal(first, second)

    def test_nan_raises(self):
        with pytest.raises(NumericalError):
            T.log(Tensor([-1.0]))

    def test_inf_raises(self):
        with pytest.raises(NumericalError):
            T.exp(Tensor([1e4], dtype=np.float32))

    def test_take_rows_gathers(self):
        table = Tensor(np.arange(12.0).reshape(6, 2))
        out = T.take_rows(table, np.array([[0, 5], [5, 0]]))
        np.testing.assert_array_equal(out.data[0, 1], table.data[5])

    def test_concat_and_slice_roundtrip(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor(np.arange(8.0).reshape(2, 4))
        cat = T.concat([a, b], axis=1)
        np.testing.assert_array_equal(cat[:, :3].data, a.data)
        np.testing.assert_array_equal(cat[:, 3:].data, b.data)


class TestTapeContracts:
    def test_sum_gradient_is_ones(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), trainable=True)
        with Tape() as tape:
            tape.backward(T.reduce_sum(p))
        np.testing.assert_array_equal(tape.grad(p), np.ones((2, 3)))

    def test_square_sum_gradient(self):
        p = Tensor([1.0, 2.0], trainable=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(T.reduce_sum(T.mul(p, p)))
        np.testing.assert_allclose(tape.grad(p), [2.0, 4.0])

    def test_backward_twice_is_error(self):
        p = Tensor([1.0], trainable=True)
        with Tape() as tape:
            loss = T.reduce_sum(p)
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        p = Tensor([1.0, 2.0], trainable=True)
        with Tape() as tape:
            doubled = T.mul(p, 2.0)
            with pytest.raises(ContractError):
                tape.backward(doubled)

    def test_disconnected_loss_rejected(self):
        p = Tensor([1.0], trainable=True)
        with Tape() as tape:
            T.reduce_sum(p)  # taped work, but loss below is fresh
            stray = Tensor([2.0])
            with pytest.raises(ContractError):
                tape.backward(T.reduce_sum(stray))

    def test_no_tape_records_nothing(self):
        p = Tensor([1.0], trainable=True)
        out = T.mul(p, 3.0)
        assert out.data[0] == 3.0  # plain eager math, no active tape

    def test_gradient_accumulates_across_uses(self):
        p = Tensor([3.0], trainable=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(T.reduce_sum(T.add(T.mul(p, 2.0), T.mul(p, 5.0))))
        np.testing.assert_allclose(tape.grad(p), [7.0])

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(ContractError):
                with Tape():
                    pass


SEEDS = list(range(20))


class TestFiniteDifferences:
    """Every differentiable op against central differences (float64)."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a, b = t64(rng, 4, 5), t64(rng, 5, 2)
        w = rng.standard_normal((4, 2))
        report = check_gradients(
            lambda: T.reduce_sum(T.mul(T.matmul(a, b), w)), {"a": a, "b": b}
        )
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS[:6])
    def test_matmul_batched_and_shared_rhs(self, seed):
        rng = np.random.default_rng(seed)
        a, b = t64(rng, 3, 2, 4), t64(rng, 3, 4, 2)
        shared = t64(rng, 2, 5)
        report = check_gradients(
            lambda: T.reduce_sum(T.exp(T.matmul(T.matmul(a, b), shared))),
            {"a": a, "b": b, "shared": shared},
        )
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 3, 3)
        w = rng.standard_normal((3, 3))
        report = check_gradients(
            lambda: T.reduce_sum(T.mul(T.softmax(x, axis=-1), w)), {"x": x}
        )
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = t64(rng, 2, 8), t64(rng, 8), t64(rng, 8)
        w = rng.standard_normal((2, 8))
        report = check_gradients(
            lambda: T.reduce_sum(T.mul(T.layer_norm(x, g, b), w)),
            {"x": x, "gain": g, "bias": b},
        )
        assert report.passed, report

    @pytest.mark.parametrize(
        "op",
        [
            T.exp,
            T.softplus,
            T.gelu,
            T.neg,
            lambda x: T.log(T.add(T.mul(x, x), 1.0)),
        ],
        ids=["exp", "softplus", "gelu", "neg", "log"],
    )
    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_elementwise(self, op, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 4, 3)
        w = rng.standard_normal((4, 3))
        report = check_gradients(lambda: T.reduce_sum(T.mul(op(x), w)), {"x": x})
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_add_mul_div_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 4, 3)
        row = t64(rng, 3)
        scale = Tensor(rng.uniform(0.5, 2.0, (4, 1)), trainable=True, dtype=np.float64)
        report = check_gradients(
            lambda: T.reduce_sum(T.div(T.mul(T.add(x, row), x), scale)),
            {"x": x, "row": row, "scale": scale},
        )
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_shape_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 2, 3, 4)
        y = t64(rng, 2, 3, 4)
        w = rng.standard_normal((3, 2, 8))

        def loss():
            stacked = T.concat([x, y], axis=2)  # (2,3,8)
            swapped = T.transpose(stacked, (1, 0, 2))  # (3,2,8)
            picked = swapped[:, :, 1:]  # slice keeps grad path
            flat = T.reshape(picked, (3, 14))
            return T.reduce_sum(T.mul(T.reshape(flat, (3, 2, 7)), w[:, :, 1:]))

        report = check_gradients(loss, {"x": x, "y": y})
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_reductions(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 3, 5)
        report = check_gradients(
            lambda: T.add(
                T.reduce_sum(T.mul(T.reduce_mean(x, axis=1), [1.0, 2.0, 3.0])),
                T.reduce_mean(T.mul(x, x)),
            ),
            {"x": x},
        )
        assert report.passed, report

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_take_rows(self, seed):
        rng = np.random.default_rng(seed)
        table = t64(rng, 7, 3)
        idx = rng.integers(0, 7, size=(4, 5))
        w = rng.standard_normal((4, 5, 3))
        report = check_gradients(
            lambda: T.reduce_sum(T.mul(T.take_rows(table, idx), w)), {"table": table}
        )
        assert report.passed, report
