import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossview.errors import ValidationError
from crossview.losses import (
    LossConfig,
    clamp_logit_scale,
    info_nce,
    soft_margin_triplet_loss,
    triplet_loss,
)


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def fd_check(loss_fn, arrays, analytic, step=1e-5, tol=1e-6):
    """Max relative error of analytic grads vs central differences."""
    worst = 0.0
    for a_idx, x in enumerate(arrays):
        numeric = np.zeros_like(x)
        for i in range(x.size):
            orig = x.flat[i]
            x.flat[i] = orig + step
            up = loss_fn()
            x.flat[i] = orig - step
            down = loss_fn()
            x.flat[i] = orig
            numeric.flat[i] = (up - down) / (2 * step)
        a = analytic[a_idx]
        denom = max(np.abs(a).max(), np.abs(numeric).max(), 1e-10)
        worst = max(worst, float(np.abs(a - numeric).max() / denom))
    assert worst <= tol, f"finite-difference mismatch: {worst:.3e}"


class TestInfoNce:
    def test_single_pair_zero_loss_and_grads(self):
        q = np.array([[1.0, 0.0]])
        r = np.array([[0.0, 1.0]])
        out = info_nce(q, r, LossConfig(label_smoothing=0.0))
        assert out.loss == 0.0
        np.testing.assert_array_equal(out.grad_queries, 0.0)
        np.testing.assert_array_equal(out.grad_references, 0.0)
        assert out.grad_logit_scale == 0.0

    @pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
    def test_uniform_logits_give_ln_n(self, eps):
        q = np.tile([[1.0, 0.0]], (2, 1))
        r = np.tile([[0.0, 1.0]], (2, 1))
        out = info_nce(q, r, LossConfig(label_smoothing=eps))
        assert out.loss == pytest.approx(math.log(2), abs=1e-12)

    def test_identity_similarity_closed_form(self):
        cfg = LossConfig(label_smoothing=0.0, logit_scale=0.0)
        out = info_nce(np.eye(2), np.eye(2), cfg)
        assert out.loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)

    def test_symmetric_is_mean_of_directions(self):
        rng = np.random.default_rng(0)
        q, r = unit(rng, 6, 4), unit(rng, 6, 4)
        l_qr = info_nce(q, r, LossConfig(direction="query_to_ref")).loss
        l_rq = info_nce(q, r, LossConfig(direction="ref_to_query")).loss
        l_sym = info_nce(q, r, LossConfig(direction="symmetric")).loss
        assert l_sym == 0.5 * (l_qr + l_rq)

    @given(st.integers(0, 10_000))
    def test_symmetric_invariant_under_joint_permutation(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        q, r = unit(rng, n, 3), unit(rng, n, 3)
        perm = rng.permutation(n)
        cfg = LossConfig()
        assert info_nce(q[perm], r[perm], cfg).loss == pytest.approx(
            info_nce(q, r, cfg).loss, abs=1e-12
        )

    @staticmethod
    def embed_similarity(sim):
        """Unit-row Q, R with Q @ R.T == sim (needs column norms < 1)."""
        n = sim.shape[0]
        q = np.hstack([np.eye(n), np.zeros((n, 1))])
        pad = np.sqrt(1.0 - (sim**2).sum(axis=0))
        r = np.hstack([sim.T, pad[:, None]])
        return q, r

    def test_loss_decreases_with_diagonal_similarity(self):
        # raise the diagonal, hold every off-diagonal entry fixed
        rng = np.random.default_rng(7)
        sim = rng.uniform(-0.2, 0.2, size=(8, 8))
        np.fill_diagonal(sim, 0.3)
        raised = sim.copy()
        np.fill_diagonal(raised, 0.5)
        cfg = LossConfig(label_smoothing=0.1, logit_scale=0.0)
        q0, r0 = self.embed_similarity(sim)
        q1, r1 = self.embed_similarity(raised)
        np.testing.assert_allclose(q0 @ r0.T, sim, atol=1e-12)
        assert info_nce(q1, r1, cfg).loss < info_nce(q0, r0, cfg).loss

    @pytest.mark.parametrize("direction", ["query_to_ref", "ref_to_query", "symmetric"])
    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_gradients_match_finite_differences(self, direction, eps):
        rng = np.random.default_rng(42)
        q, r = unit(rng, 5, 4), unit(rng, 5, 4)
        cfg = LossConfig(label_smoothing=eps, direction=direction, logit_scale=1.3)
        out = info_nce(q, r, cfg)
        fd_check(lambda: info_nce(q, r, cfg).loss, [q, r], [out.grad_queries, out.grad_references])
        # logit scale gradient
        step = 1e-5
        up = info_nce(q, r, LossConfig(label_smoothing=eps, direction=direction,
                                       logit_scale=1.3 + step)).loss
        down = info_nce(q, r, LossConfig(label_smoothing=eps, direction=direction,
                                         logit_scale=1.3 - step)).loss
        numeric = (up - down) / (2 * step)
        assert out.grad_logit_scale == pytest.approx(numeric, rel=1e-6, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            info_nce(np.ones((2, 3)), np.ones((3, 3)), LossConfig())

    def test_non_finite_rejected(self):
        bad = np.array([[1.0, np.nan]])
        with pytest.raises(ValidationError):
            info_nce(bad, np.ones((1, 2)), LossConfig())


class TestTripletLoss:
    def test_satisfied_margin_zero_loss(self):
        a = np.array([[1.0, 0.0]])
        n = np.array([[0.0, 1.0]])  # d(a,n)^2 = 2 >= margin
        out = triplet_loss(a, a.copy(), n, margin=0.3)
        assert out.loss == 0.0
        np.testing.assert_array_equal(out.grad_queries, 0.0)

    def test_degenerate_triple_gives_margin(self):
        a = np.array([[0.6, 0.8]])
        out = triplet_loss(a, a.copy(), a.copy(), margin=0.3)
        assert out.loss == pytest.approx(0.3, abs=1e-15)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(1)
        a, p, n = (unit(rng, 7, 5) for _ in range(3))
        out = triplet_loss(a, p, n, margin=0.3)
        expected = np.mean(
            [
                max(0.0, float(((a[i] - p[i]) ** 2).sum() - ((a[i] - n[i]) ** 2).sum() + 0.3))
                for i in range(7)
            ]
        )
        assert out.loss == pytest.approx(expected, rel=1e-12)

    def test_non_finite_rejected(self):
        import numpy as np
        bad = np.array([[np.inf, 0.0]])
        ok = np.ones((1, 2))
        with pytest.raises(ValidationError):
            triplet_loss(bad, ok, ok)
        with pytest.raises(ValidationError):
            soft_margin_triplet_loss(ok, bad, ok)

    def test_gradients_match_finite_differences_away_from_kink(self):
        rng = np.random.default_rng(2)
        a, p, n = (unit(rng, 6, 4) for _ in range(3))
        out = triplet_loss(a, p, n, margin=0.3)
        arg = ((a - p) ** 2).sum(1) - ((a - n) ** 2).sum(1) + 0.3
        assert np.abs(arg).min() > 1e-3  # away from the hinge kink
        fd_check(
            lambda: triplet_loss(a, p, n, margin=0.3).loss,
            [a, p, n],
            [out.grad_queries, out.grad_references, out.grad_negatives],
        )


class TestSoftMarginTriplet:
    def test_equal_distances_give_ln2(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = soft_margin_triplet_loss(a, p, p.copy())
        assert out.loss == pytest.approx(math.log(2), abs=1e-12)

    def test_large_negative_argument(self):
        # d(a,p)^2 - d(a,n)^2 = -20 evaluated without underflow surprises
        a = np.array([[0.0]])
        p = np.array([[0.0]])
        n = np.array([[math.sqrt(20.0)]])
        out = soft_margin_triplet_loss(a, p, n)
        assert out.loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
        assert out.loss == pytest.approx(2.061153622438558e-09, rel=1e-6)

    def test_large_positive_argument_no_overflow(self):
        a = np.array([[0.0]])
        p = np.array([[40.0]])
        n = np.array([[0.0]])
        out = soft_margin_triplet_loss(a, p, n)
        assert out.loss == pytest.approx(1600.0, rel=1e-12)
        assert np.isfinite(out.grad_queries).all()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        a, p, n = (unit(rng, 6, 4) for _ in range(3))
        out = soft_margin_triplet_loss(a, p, n)
        fd_check(
            lambda: soft_margin_triplet_loss(a, p, n).loss,
            [a, p, n],
            [out.grad_queries, out.grad_references, out.grad_negatives],
        )


class TestClampLogitScale:
    def test_below_max_unchanged(self):
        cfg = LossConfig(logit_scale=0.0)
        assert clamp_logit_scale(cfg).logit_scale == 0.0

    def test_clamp_active(self):
        cfg = LossConfig(logit_scale=10.0)
        assert clamp_logit_scale(cfg).logit_scale == pytest.approx(math.log(100.0))

    def test_idempotent(self):
        cfg = LossConfig(logit_scale=7.5)
        once = clamp_logit_scale(cfg)
        assert clamp_logit_scale(once) == once


class TestLossConfig:
    def test_smoothing_range(self):
        with pytest.raises(ValidationError):
            LossConfig(label_smoothing=1.0)
        with pytest.raises(ValidationError):
            LossConfig(label_smoothing=-0.1)

    def test_direction_checked(self):
        with pytest.raises(ValidationError):
            LossConfig(direction="sideways")

    def test_default_temperature(self):
        assert math.exp(LossConfig().logit_scale) == pytest.approx(1 / 0.07)
