"""Tests for the objective functions.

Values are pinned against loop-level oracles and gradients against
central finite differences; the sorted-matching properties (permutation
invariance, domination by plain MSE, the chessboard construction) run
over many seeded random pairs.
"""

import numpy as np
import pytest

from sketchgen import losses
from sketchgen.ops import ShapeError


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


class TestMse:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 6, 6))
        out = losses.mse(x, x)
        assert out.value == 0.0
        np.testing.assert_array_equal(out.grad, np.zeros_like(x))

    def test_single_element(self):
        out = losses.mse(np.array([0.0]), np.array([2.0]))
        assert out.value == 4.0
        np.testing.assert_array_equal(out.grad, [-4.0])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(2, 5, 7))
        t = rng.normal(size=(2, 5, 7))
        acc = 0.0
        for i in np.ndindex(p.shape):
            acc += (p[i] - t[i]) ** 2
        want = acc / p.size
        assert abs(losses.mse(p, t).value - want) < 1e-12

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=(1, 4, 5))
        t = rng.normal(size=(1, 4, 5))

        def loss():
            return losses.mse(p, t).value

        num = numeric_grad(loss, p)
        assert rel_err(losses.mse(p, t).grad, num).max() < 1e-4

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            losses.mse(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestSortPermutation:
    def test_sorts_ascending(self):
        x = np.array([3.0, 1.0, 2.0])
        perm = losses.sort_permutation(x)
        np.testing.assert_array_equal(x[perm], [1.0, 2.0, 3.0])

    def test_is_bijection(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=40)
        perm = losses.sort_permutation(x)
        assert sorted(perm) == list(range(40))

    def test_stable_on_ties(self):
        x = np.array([2.0, 1.0, 2.0, 1.0])
        np.testing.assert_array_equal(losses.sort_permutation(x), [1, 3, 0, 2])


class TestSmMse:
    def test_permutation_of_target_is_zero(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            t = rng.normal(size=(1, 6, 6))
            p = rng.permutation(t.ravel()).reshape(t.shape)
            assert losses.sm_mse(p, t).value == 0.0

    def test_ascending_pair_equals_mse(self):
        p = np.arange(9.0).reshape(1, 3, 3)
        t = np.arange(9.0).reshape(1, 3, 3) * 1.5
        assert losses.sm_mse(p, t).value == losses.mse(p, t).value

    def test_value_matches_sort_then_mse_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = rng.normal(size=(1, 5, 4))
            t = rng.normal(size=(1, 5, 4))
            want = losses.mse(np.sort(p.ravel()), np.sort(t.ravel())).value
            assert abs(losses.sm_mse(p, t).value - want) < 1e-15

    def test_target_permutation_invariance(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(1, 6, 5))
        t = rng.normal(size=(1, 6, 5))
        base = losses.sm_mse(p, t).value
        for _ in range(20):
            shuffled = rng.permutation(t.ravel()).reshape(t.shape)
            assert losses.sm_mse(p, shuffled).value == base

    def test_dominated_by_mse(self):
        # sorted matching is the cheapest pairing over reorderings
        rng = np.random.default_rng(7)
        for _ in range(1000):
            p = rng.normal(size=16)
            t = rng.normal(size=16)
            assert losses.sm_mse(p, t).value <= losses.mse(p, t).value + 1e-15

    def test_chessboard_shift(self):
        yy, xx = np.mgrid[0:8, 0:8]
        board = ((yy + xx) % 2).astype(np.float64)[None]
        shifted = 1.0 - board
        assert losses.mse(board, shifted).value == 1.0
        assert losses.sm_mse(board, shifted).value == 0.0

    def test_grad_matches_finite_differences_away_from_ties(self):
        rng = np.random.default_rng(8)
        # distinct well-separated values keep the permutation constant
        # under the probe step
        p = rng.permutation(20).astype(np.float64).reshape(1, 4, 5)
        t = rng.normal(size=(1, 4, 5))

        def loss():
            return losses.sm_mse(p, t).value

        num = numeric_grad(loss, p)
        assert rel_err(losses.sm_mse(p, t).grad, num).max() < 1e-4

    def test_grad_shape_matches_prediction(self):
        p = np.zeros((2, 3, 4))
        t = np.ones((2, 3, 4))
        assert losses.sm_mse(p, t).grad.shape == p.shape


class TestTexturalLoss:
    def test_beta_zero_equals_mse(self):
        rng = np.random.default_rng(9)
        p = rng.normal(size=(1, 4, 4))
        t = rng.normal(size=(1, 4, 4))
        got = losses.textural_loss(p, t, beta=0.0)
        want = losses.mse(p, t)
        assert got.value == want.value
        np.testing.assert_array_equal(got.grad, want.grad)

    def test_identity_is_zero(self):
        x = np.random.default_rng(10).normal(size=(1, 5, 5))
        assert losses.textural_loss(x, x, beta=10.0).value == 0.0

    def test_weighted_sum_of_components(self):
        rng = np.random.default_rng(11)
        p = rng.normal(size=(1, 6, 6))
        t = rng.normal(size=(1, 6, 6))
        got = losses.textural_loss(p, t, beta=10.0)
        m, s = losses.mse(p, t), losses.sm_mse(p, t)
        assert abs(got.value - (m.value + 10.0 * s.value)) < 1e-12
        np.testing.assert_allclose(got.grad, m.grad + 10.0 * s.grad, atol=1e-12)

    def test_rejects_negative_beta(self):
        with pytest.raises(ValueError):
            losses.textural_loss(np.zeros(4), np.zeros(4), beta=-1.0)


class TestSoftmaxParsingLoss:
    def test_uniform_logits_give_ln3(self):
        logits = np.zeros((3, 4, 5))
        labels = np.random.default_rng(12).integers(1, 4, size=(4, 5))
        out = losses.softmax_parsing_loss(logits, labels)
        assert abs(out.value - np.log(3.0)) < 1e-12

    def test_saturated_true_class_is_near_zero(self):
        labels = np.random.default_rng(13).integers(1, 4, size=(3, 3))
        logits = np.zeros((3, 3, 3))
        np.put_along_axis(logits, (labels - 1)[None], 50.0, axis=0)
        assert losses.softmax_parsing_loss(logits, labels).value < 1e-8

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        logits = rng.normal(size=(3, 3, 4))
        labels = rng.integers(1, 4, size=(3, 4))

        def loss():
            return losses.softmax_parsing_loss(logits, labels).value

        num = numeric_grad(loss, logits)
        got = losses.softmax_parsing_loss(logits, labels).grad
        assert rel_err(got, num).max() < 1e-4

    def test_grad_sums_to_zero_over_channels(self):
        rng = np.random.default_rng(15)
        logits = rng.normal(size=(3, 5, 5))
        labels = rng.integers(1, 4, size=(5, 5))
        grad = losses.softmax_parsing_loss(logits, labels).grad
        np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-15)

    def test_extreme_logits_stay_finite(self):
        logits = np.zeros((3, 2, 2))
        logits[0] = 1e4
        labels = np.full((2, 2), 2)
        out = losses.softmax_parsing_loss(logits, labels)
        assert np.isfinite(out.value)
        assert np.all(np.isfinite(out.grad))

    def test_rejects_bad_labels(self):
        logits = np.zeros((3, 2, 2))
        with pytest.raises(ValueError):
            losses.softmax_parsing_loss(logits, np.zeros((2, 2), dtype=int))
        with pytest.raises(ValueError):
            losses.softmax_parsing_loss(logits, np.full((2, 2), 4))

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ShapeError):
            losses.softmax_parsing_loss(np.zeros((2, 2, 2)), np.ones((2, 2), dtype=int))

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(16)
        probs = losses.softmax_probs(rng.normal(size=(3, 6, 6)))
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)
        assert probs.min() >= 0.0


class TestCombinedLoss:
    def _terms(self, seed):
        rng = np.random.default_rng(seed)
        p1, p2 = rng.normal(size=(2, 1, 4, 4))
        t = rng.normal(size=(1, 4, 4))
        return losses.mse(p1, t), losses.textural_loss(p2, t)

    def test_alpha_zero_keeps_structural_only(self):
        s, t = self._terms(17)
        out = losses.combined_bfcn_loss(s, t, alpha=0.0)
        assert out.value == s.value
        np.testing.assert_array_equal(out.grad[0], s.grad)
        np.testing.assert_array_equal(out.grad[1], np.zeros_like(t.grad))

    def test_alpha_one_is_plain_sum(self):
        s, t = self._terms(18)
        out = losses.combined_bfcn_loss(s, t, alpha=1.0)
        assert out.value == s.value + t.value
        np.testing.assert_array_equal(out.grad[1], t.grad)

    def test_zero_terms_give_zero(self):
        z = losses.LossValue(0.0, np.zeros((1, 2, 2)))
        assert losses.combined_bfcn_loss(z, z, alpha=1.0).value == 0.0

    def test_rejects_negative_alpha(self):
        s, t = self._terms(19)
        with pytest.raises(ValueError):
            losses.combined_bfcn_loss(s, t, alpha=-0.5)
