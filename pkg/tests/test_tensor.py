"""Tape mechanics and forward/backward behavior of every tensor operation."""

import numpy as np
import pytest

import tinyembed.tensor as T
from tinyembed.errors import ShapeError, TapeError
from tinyembed.tensor import Tape, Tensor, backward


class TestTapeMechanics:
    def test_no_recording_without_tape(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        out = T.add(a, a)
        assert out.requires_grad is False

    def test_no_recording_without_requires_grad(self):
        a = Tensor(np.ones((2, 2)))
        with Tape() as tape:
            out = T.add(a, a)
        assert out.requires_grad is False
        assert tape.ops == []

    def test_recording_needs_tape_and_grad_flag(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = T.add(a, a)
        assert out.requires_grad is True
        assert len(tape.ops) == 1

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(TapeError):
                with Tape():
                    pass

    def test_backward_twice_is_an_error(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(a)
        backward(tape, loss)
        with pytest.raises(TapeError):
            backward(tape, loss)

    def test_backward_rejects_non_scalar_loss(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = T.scale(a, 2.0)
        with pytest.raises(TapeError):
            backward(tape, out)

    def test_backward_rejects_foreign_loss(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            T.sum_all(a)
        with Tape() as other:
            loss = T.sum_all(a)
        with pytest.raises(TapeError):
            backward(tape, loss)
        backward(other, loss)  # sanity: the right tape accepts it

    def test_gradients_accumulate_across_uses(self):
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(a, a))
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, np.full(3, 2.0))

    def test_untouched_branch_gets_zero_grad_not_none(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        with Tape() as tape:
            T.sum_all(b)  # on the tape but not on the loss path
            loss = T.sum_all(a)
        backward(tape, loss)
        np.testing.assert_array_equal(b.grad, np.zeros(2))

    def test_frozen_input_keeps_grad_none(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        w = Tensor(np.ones((3, 4)))  # frozen
        with Tape() as tape:
            loss = T.sum_all(T.matmul(a, w))
        backward(tape, loss)
        assert w.grad is None
        assert a.grad is not None


class TestForwardValues:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_add_and_mul_broadcast_like_numpy(self):
        a = self.rng.normal(size=(4, 1, 5))
        b = self.rng.normal(size=(3, 5))
        np.testing.assert_array_equal(T.add(Tensor(a), Tensor(b)).values, a + b)
        np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(b)).values, a * b)

    def test_scale_matches_scalar_multiply(self):
        a = self.rng.normal(size=(3, 3))
        np.testing.assert_array_equal(T.scale(Tensor(a), -1.5).values, a * -1.5)

    def test_matmul_batched_matches_numpy(self):
        a = self.rng.normal(size=(2, 3, 4, 5))
        b = self.rng.normal(size=(3, 5, 6))
        np.testing.assert_allclose(
            T.matmul(Tensor(a), Tensor(b)).values, np.matmul(a, b), rtol=0, atol=0
        )

    def test_transpose_reshape_concatenate(self):
        a = self.rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(
            T.transpose(Tensor(a), (2, 0, 1)).values, np.transpose(a, (2, 0, 1))
        )
        np.testing.assert_array_equal(
            T.reshape(Tensor(a), (6, 4)).values, a.reshape(6, 4)
        )
        b = self.rng.normal(size=(2, 5, 4))
        np.testing.assert_array_equal(
            T.concatenate([Tensor(a), Tensor(b)], axis=1).values,
            np.concatenate([a, b], axis=1),
        )

    def test_sum_and_mean_reduce_to_scalars(self):
        a = self.rng.normal(size=(4, 6))
        assert T.sum_all(Tensor(a)).values.shape == ()
        np.testing.assert_allclose(float(T.sum_all(Tensor(a)).values), a.sum())
        np.testing.assert_allclose(float(T.mean_all(Tensor(a)).values), a.mean())

    def test_gelu_matches_tanh_formula(self):
        x = np.linspace(-4, 4, 41)
        u = np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)
        expected = 0.5 * x * (1 + np.tanh(u))
        np.testing.assert_allclose(T.gelu(Tensor(x)).values, expected, atol=1e-15)

    def test_softmax_rows_sum_to_one_and_handle_huge_logits(self):
        x = self.rng.normal(size=(5, 7)) * 500.0
        y = T.softmax_rows(Tensor(x)).values
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y.sum(axis=1), np.ones(5), atol=1e-12)

    def test_logsumexp_rows_matches_direct_formula(self):
        x = self.rng.normal(size=(6, 9))
        expected = np.log(np.exp(x).sum(axis=1))
        np.testing.assert_allclose(
            T.logsumexp_rows(Tensor(x)).values, expected, atol=1e-12
        )

    def test_layer_norm_normalizes_rows(self):
        x = self.rng.normal(size=(8, 16)) * 3 + 2
        gamma = Tensor(np.ones(16))
        beta = Tensor(np.zeros(16))
        y = T.layer_norm(Tensor(x), gamma, beta).values
        np.testing.assert_allclose(y.mean(axis=1), np.zeros(8), atol=1e-12)
        np.testing.assert_allclose(y.std(axis=1), np.ones(8), atol=1e-4)

    def test_l2_normalize_rows_unit_norms(self):
        x = self.rng.normal(size=(5, 12))
        y = T.l2_normalize_rows(Tensor(x)).values
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.ones(5), atol=1e-12)

    def test_embedding_lookup_gathers_rows(self):
        table = self.rng.normal(size=(10, 4))
        ids = np.array([[3, 1], [9, 0]])
        np.testing.assert_array_equal(
            T.embedding_lookup(Tensor(table), ids).values, table[ids]
        )

    def test_take_per_row_2d_and_3d(self):
        a2 = self.rng.normal(size=(4, 6))
        idx = np.array([0, 5, 2, 3])
        np.testing.assert_array_equal(
            T.take_per_row(Tensor(a2), idx).values, a2[np.arange(4), idx]
        )
        a3 = self.rng.normal(size=(3, 5, 7))
        idx3 = np.array([4, 0, 2])
        np.testing.assert_array_equal(
            T.take_per_row(Tensor(a3), idx3).values, a3[np.arange(3), idx3, :]
        )

    def test_dropout_zero_p_is_identity_and_leaves_stream_alone(self):
        rng = np.random.default_rng(3)
        a = Tensor(self.rng.normal(size=(4, 4)))
        before = rng.bit_generator.state["state"]["state"]
        out = T.dropout(a, 0.0, rng)
        after = rng.bit_generator.state["state"]["state"]
        assert out is a
        assert before == after

    def test_dropout_scales_survivors_by_keep_probability(self):
        a = Tensor(np.ones((100, 100)))
        out = T.dropout(a, 0.25, np.random.default_rng(0)).values
        kept = out[out != 0.0]
        np.testing.assert_allclose(kept, np.full(kept.size, 1.0 / 0.75))
        # fraction dropped is near p
        assert abs((out == 0.0).mean() - 0.25) < 0.02


class TestBackwardValues:
    def setup_method(self):
        self.rng = np.random.default_rng(11)

    def test_add_unbroadcasts_gradients(self):
        a = Tensor(self.rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(self.rng.normal(size=(5,)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.add(a, b))
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, np.ones((4, 5)))
        np.testing.assert_array_equal(b.grad, np.full(5, 4.0))

    def test_mul_routes_the_other_operand(self):
        av = self.rng.normal(size=(3, 3))
        bv = self.rng.normal(size=(3, 3))
        a, b = Tensor(av, requires_grad=True), Tensor(bv, requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(T.mul(a, b))
        backward(tape, loss)
        np.testing.assert_allclose(a.grad, bv)
        np.testing.assert_allclose(b.grad, av)

    def test_matmul_grads_match_transpose_rule(self):
        av = self.rng.normal(size=(4, 3))
        bv = self.rng.normal(size=(3, 5))
        g = self.rng.normal(size=(4, 5))
        a, b = Tensor(av, requires_grad=True), Tensor(bv, requires_grad=True)
        with Tape() as tape:
            out = T.matmul(a, b)
            loss = T.sum_all(T.mul(out, Tensor(g)))
        backward(tape, loss)
        np.testing.assert_allclose(a.grad, g @ bv.T)
        np.testing.assert_allclose(b.grad, av.T @ g)

    def test_take_per_row_scatters_gradient(self):
        a = Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        idx = np.array([2, 0, 3])
        with Tape() as tape:
            loss = T.sum_all(T.take_per_row(a, idx))
        backward(tape, loss)
        expected = np.zeros((3, 4))
        expected[np.arange(3), idx] = 1.0
        np.testing.assert_array_equal(a.grad, expected)

    def test_embedding_lookup_accumulates_duplicate_ids(self):
        table = Tensor(self.rng.normal(size=(6, 3)), requires_grad=True)
        ids = np.array([2, 2, 2, 5])
        with Tape() as tape:
            loss = T.sum_all(T.embedding_lookup(table, ids))
        backward(tape, loss)
        assert table.grad[2].tolist() == [3.0, 3.0, 3.0]
        assert table.grad[5].tolist() == [1.0, 1.0, 1.0]
        assert np.all(table.grad[[0, 1, 3, 4]] == 0.0)


class TestShapeValidation:
    def test_add_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_matmul_requires_2d(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_matmul_inner_dims_must_agree(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_matmul_leading_dims_must_broadcast(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((5, 4, 6))))

    def test_reshape_checks_size(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.ones((2, 3))), (7,))

    def test_concatenate_checks_rank(self):
        with pytest.raises(ShapeError):
            T.concatenate([Tensor(np.ones((2, 3))), Tensor(np.ones(3))], axis=0)

    def test_layer_norm_checks_gamma_beta(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((2, 8))), Tensor(np.ones(4)), Tensor(np.zeros(8)))

    def test_l2_normalize_rejects_non_2d(self):
        with pytest.raises(ShapeError):
            T.l2_normalize_rows(Tensor(np.ones(5)))

    def test_l2_normalize_rejects_zero_row(self):
        x = np.ones((3, 4))
        x[1] = 0.0
        with pytest.raises(ShapeError, match="row 1"):
            T.l2_normalize_rows(Tensor(x))

    def test_embedding_lookup_id_range_and_dtype(self):
        table = Tensor(np.ones((4, 2)))
        with pytest.raises(ShapeError):
            T.embedding_lookup(table, np.array([0, 4]))
        with pytest.raises(ShapeError):
            T.embedding_lookup(table, np.array([0.5]))

    def test_take_per_row_index_bounds(self):
        a = Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            T.take_per_row(a, np.array([0, 3]))
        with pytest.raises(ShapeError):
            T.take_per_row(a, np.array([0]))

    def test_dropout_probability_range(self):
        a = Tensor(np.ones(3))
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            T.dropout(a, 1.0, rng)
        with pytest.raises(ShapeError):
            T.dropout(a, -0.1, rng)
