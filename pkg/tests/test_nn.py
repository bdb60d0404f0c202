import numpy as np
import pytest

from audiocap import nn
from audiocap.nn import (
    AffineParams,
    DimensionMismatch,
    EmptySequence,
    GruCellParams,
    ShapeMismatch,
    TargetOutOfRange,
    affine_backward,
    affine_forward,
    cosine_dissim_backward,
    cosine_dissim_forward,
    embedding_backward,
    embedding_forward,
    grad_check,
    gru_cell_backward,
    gru_cell_forward,
    init_affine,
    init_gru,
    mean_pool_backward,
    mean_pool_forward,
    softmax_ce_backward,
    softmax_ce_forward,
)

from oracles import gru_step_oracle


def zero_gru(input_size, hidden):
    return GruCellParams(w_ih=np.zeros((3 * hidden, input_size)),
                         w_hh=np.zeros((3 * hidden, hidden)),
                         b_ih=np.zeros(3 * hidden), b_hh=np.zeros(3 * hidden))


class TestGruForward:
    def test_zero_params_zero_state(self):
        p = zero_gru(3, 4)
        h_new, _ = gru_cell_forward(p, np.zeros(3), np.zeros(4))
        np.testing.assert_array_equal(h_new, np.zeros(4))

    def test_zero_params_halves_state(self, rng):
        p = zero_gru(3, 4)
        h = rng.normal(size=4)
        h_new, _ = gru_cell_forward(p, rng.normal(size=3), h)
        np.testing.assert_allclose(h_new, 0.5 * h, atol=1e-15)

    def test_matches_straight_line_oracle(self, rng):
        p = init_gru(rng, 3, 4)
        x = rng.normal(size=3)
        h = rng.normal(size=4)
        h_new, _ = gru_cell_forward(p, x, h)
        expected = gru_step_oracle(p.w_ih, p.w_hh, p.b_ih, p.b_hh, x, h)
        np.testing.assert_allclose(h_new, expected, atol=1e-12)

    def test_output_bounded_by_unit_state(self, rng):
        # Convex combination of tanh output and h keeps entries in (-1, 1).
        for _ in range(25):
            p = init_gru(rng, 5, 6)
            h = rng.uniform(-0.999, 0.999, 6)
            h_new, _ = gru_cell_forward(p, rng.normal(size=5) * 3.0, h)
            assert np.all(np.abs(h_new) < 1.0)

    def test_shape_mismatch(self, rng):
        p = init_gru(rng, 3, 4)
        with pytest.raises(ShapeMismatch):
            gru_cell_forward(p, np.zeros(5), np.zeros(4))


class TestGruBackward:
    def test_zero_upstream_zero_grads(self, rng):
        p = init_gru(rng, 3, 4)
        _, cache = gru_cell_forward(p, rng.normal(size=3), rng.normal(size=4))
        dx, dh, dp = gru_cell_backward(p, cache, np.zeros(4))
        assert not dx.any() and not dh.any()
        assert not dp.w_ih.any() and not dp.w_hh.any()

    def test_finite_differences(self, rng):
        p = init_gru(rng, 3, 5)
        x = rng.normal(size=3)
        h = rng.normal(size=5)
        w = rng.normal(size=5)

        def f():
            h_new, _ = gru_cell_forward(p, x, h)
            return float(w @ h_new)

        _, cache = gru_cell_forward(p, x, h)
        dx, dh, dp = gru_cell_backward(p, cache, w.copy())
        err = grad_check(f, [p.w_ih, p.w_hh, p.b_ih, p.b_hh, x, h],
                         [dp.w_ih, dp.w_hh, dp.b_ih, dp.b_hh, dx, dh])
        assert err <= 1e-6

    def test_saturated_update_gate_passes_state_through(self, rng):
        # Huge update-gate bias forces z ~ 1, so h' ~ h and dx ~ 0.
        p = init_gru(rng, 3, 4)
        p.b_ih[4:8] = 60.0
        x = rng.normal(size=3)
        h = rng.normal(size=4)
        h_new, cache = gru_cell_forward(p, x, h)
        np.testing.assert_allclose(h_new, h, atol=1e-12)
        dh_new = rng.normal(size=4)
        dx, dh, _ = gru_cell_backward(p, cache, dh_new)
        np.testing.assert_allclose(dh, dh_new, atol=1e-12)
        np.testing.assert_allclose(dx, 0.0, atol=1e-12)


class TestAffineEmbeddingPool:
    def test_affine_identity(self, rng):
        p = AffineParams(w=np.eye(4), b=np.zeros(4))
        x = rng.normal(size=4)
        y, _ = affine_forward(p, x)
        np.testing.assert_array_equal(y, x)

    def test_affine_finite_differences(self, rng):
        p = init_affine(rng, 3, 5)
        x = rng.normal(size=5)
        w = rng.normal(size=3)

        def f():
            y, _ = affine_forward(p, x)
            return float(w @ y)

        _, cache = affine_forward(p, x)
        dx, dp = affine_backward(p, cache, w.copy())
        err = grad_check(f, [p.w, p.b, x], [dp.w, dp.b, dx])
        assert err <= 1e-6

    def test_embedding_lookup_and_grad(self, rng):
        table = rng.normal(size=(6, 4))
        vec, cache = embedding_forward(table, 3)
        np.testing.assert_array_equal(vec, table[3])
        dtable = embedding_backward(table.shape, cache, np.ones(4))
        assert dtable[3].sum() == 4.0 and dtable.sum() == 4.0
        with pytest.raises(TargetOutOfRange):
            embedding_forward(table, 6)

    def test_mean_pool_example(self):
        pooled, _ = mean_pool_forward(np.array([[1.0, 3.0], [3.0, 5.0]]))
        np.testing.assert_array_equal(pooled, [2.0, 4.0])

    def test_mean_pool_identical_rows_exact(self):
        row = np.array([0.3, -1.2, 7.5])
        pooled, _ = mean_pool_forward(np.tile(row, (5, 1)))
        np.testing.assert_array_equal(pooled, row)

    def test_mean_pool_empty(self):
        with pytest.raises(EmptySequence):
            mean_pool_forward(np.zeros((0, 3)))

    def test_mean_pool_finite_differences(self, rng):
        rows = rng.normal(size=(4, 3))
        w = rng.normal(size=3)

        def f():
            pooled, _ = mean_pool_forward(rows)
            return float(w @ pooled)

        _, t = mean_pool_forward(rows)
        drows = mean_pool_backward(t, w.copy())
        assert grad_check(f, [rows], [drows]) <= 1e-6


class TestSoftmaxCe:
    def test_uniform_logits(self):
        loss, _ = softmax_ce_forward(np.zeros(4), 2)
        assert abs(loss - np.log(4.0)) < 1e-12

    def test_loss_decreases_with_margin(self):
        losses = []
        for margin in (0.0, 1.0, 3.0, 8.0, 20.0):
            logits = np.zeros(5)
            logits[1] = margin
            loss, _ = softmax_ce_forward(logits, 1)
            losses.append(loss)
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-6

    def test_loss_nonnegative(self, rng):
        for _ in range(100):
            logits = rng.normal(size=8) * 5
            loss, _ = softmax_ce_forward(logits, int(rng.integers(0, 8)))
            assert loss >= 0.0

    def test_gradient_is_probs_minus_onehot(self, rng):
        logits = rng.normal(size=6)

        def f():
            loss, _ = softmax_ce_forward(logits, 2)
            return float(loss)

        _, cache = softmax_ce_forward(logits, 2)
        dlogits = softmax_ce_backward(cache)
        assert grad_check(f, [logits], [dlogits]) <= 1e-6

    def test_target_out_of_range(self):
        with pytest.raises(TargetOutOfRange):
            softmax_ce_forward(np.zeros(3), 3)


class TestCosineDissim:
    def test_identical_vectors(self, rng):
        a = rng.normal(size=5)
        loss, _ = cosine_dissim_forward(a, a.copy())
        assert abs(loss) < 1e-12

    def test_orthogonal_and_opposite(self):
        a = np.array([1.0, 0.0])
        loss, _ = cosine_dissim_forward(a, np.array([0.0, 1.0]))
        assert abs(loss - 1.0) < 1e-12
        loss, _ = cosine_dissim_forward(a, -a)
        assert abs(loss - 2.0) < 1e-12

    def test_zero_vector_clamp(self):
        loss, _ = cosine_dissim_forward(np.zeros(4), np.ones(4))
        assert loss == 1.0 and np.isfinite(loss)

    def test_range_property(self, rng):
        for _ in range(100):
            loss, _ = cosine_dissim_forward(rng.normal(size=6) * 10, rng.normal(size=6))
            assert 0.0 <= loss <= 2.0

    def test_finite_differences(self, rng):
        a = rng.normal(size=7)
        b = rng.normal(size=7)

        def f():
            loss, _ = cosine_dissim_forward(a, b)
            return float(loss)

        _, cache = cosine_dissim_forward(a, b)
        da = cosine_dissim_backward(cache)
        assert grad_check(f, [a], [da]) <= 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_dissim_forward(np.zeros(3), np.zeros(4))


class TestGradCheck:
    def test_quadratic(self):
        x = np.array([3.0])

        def f():
            return float(x[0] ** 2)

        assert grad_check(f, [x], [np.array([6.0])]) <= 1e-8

    def test_constant_function(self):
        x = np.array([1.0, -2.0])

        def f():
            return 5.0

        assert grad_check(f, [x], [np.zeros(2)]) <= 1e-8
