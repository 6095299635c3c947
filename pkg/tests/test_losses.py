"""Unit tests for the adaptation objectives, with brute-force oracles."""

import numpy as np
import pytest

from sfpose import losses as ls
from sfpose import tensorgrad as tg
from sfpose.losses import LossWeights
from sfpose.tensorgrad import ContractViolation, Tensor

GRAD_TOL = 1e-4
EPS = 1e-5


def maps(shape, seed, scale=1.0):
    return np.random.default_rng(seed).uniform(0.0, scale, size=shape)


def one_hot_stack(cells, h=4, w=4, value=3.0):
    """(1, K, h, w) stack with joint j peaked at flat cell cells[j]."""
    k = len(cells)
    m = np.zeros((1, k, h, w))
    for j, c in enumerate(cells):
        m[0, j, c // w, c % w] = value
    return m


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.beta, w.gamma, w.tau) == (0.7, 0.5, 0.85, 0.3)

    def test_zero_weights_allowed(self):
        LossWeights(alpha=0.0, beta=0.0, gamma=0.0)

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            LossWeights(alpha=-0.1)
        with pytest.raises(ContractViolation):
            LossWeights(tau=0.0)


class TestMseHeatmap:
    def test_sum_per_map_mean_over_batch_and_joints(self):
        pred = np.ones((2, 3, 2, 2))
        target = np.zeros((2, 3, 2, 2))
        # each map contributes 4 cells of squared error 1 -> 4 per map
        assert ls.mse_heatmap(pred, target).item() == pytest.approx(4.0)

    def test_unbatched_input_promoted(self):
        assert ls.mse_heatmap(np.ones((3, 2, 2)), np.zeros((3, 2, 2))).item() == pytest.approx(4.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            ls.mse_heatmap(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 4)))

    def test_gradient(self):
        t = Tensor(maps((2, 2, 4, 4), 0))
        ref = maps((2, 2, 4, 4), 1)
        assert tg.grad_check(lambda x: ls.mse_heatmap(x, ref), t, eps=EPS) < GRAD_TOL

    def test_gradient_flows_to_both_sides(self):
        a = Tensor(maps((1, 1, 2, 2), 2), requires_grad=True)
        b = Tensor(maps((1, 1, 2, 2), 3), requires_grad=True)
        tg.reset_tape()
        tg.backward(ls.finetune_loss(a, b))
        assert a.grad is not None and b.grad is not None
        assert np.allclose(a.grad, -b.grad)


class TestConsistency:
    def test_equals_mse_with_constant_teacher(self):
        i, t = maps((2, 3, 4, 4), 4), maps((2, 3, 4, 4), 5)
        assert ls.consistency_loss(i, t).item() == pytest.approx(ls.mse_heatmap(i, t).item())

    def test_teacher_side_is_detached(self):
        i = Tensor(maps((1, 2, 4, 4), 6), requires_grad=True)
        t = Tensor(maps((1, 2, 4, 4), 7), requires_grad=True)
        tg.reset_tape()
        tg.backward(ls.consistency_loss(i, t))
        assert i.grad is None
        assert t.grad is not None

    def test_gradient(self):
        ref = maps((2, 2, 4, 4), 8)
        t = Tensor(maps((2, 2, 4, 4), 9))
        assert tg.grad_check(lambda x: ls.consistency_loss(ref, x), t, eps=EPS) < GRAD_TOL


def brute_force_residual(src, inn, tau):
    """Reference residual KL computed with plain numpy, no autodiff."""
    b, k = src.shape[:2]
    total = 0.0
    for bi in range(b):
        for ki in range(k):
            s = src[bi, ki].reshape(-1)
            i = inn[bi, ki].reshape(-1)
            removed = {int(np.argmax(s)), int(np.argmax(i))}
            keep = np.array([j for j in range(s.size) if j not in removed])
            def soft(v):
                z = np.exp(v[keep] / tau - np.max(v[keep] / tau))
                return z / z.sum()
            p, q = soft(s), soft(i)
            total += float(np.sum(p * (np.log(p) - np.log(q))))
    return total / (b * k)


class TestResidualLoss:
    def test_matches_brute_force(self):
        src, inn = maps((2, 3, 4, 4), 10), maps((2, 3, 4, 4), 11)
        got = ls.residual_loss(src, inn, tau=0.3).item()
        assert abs(got - brute_force_residual(src, inn, 0.3)) <= 1e-10

    def test_zero_for_identical_maps(self):
        src = maps((1, 2, 4, 4), 12)
        assert ls.residual_loss(src, src.copy(), tau=0.3).item() == pytest.approx(0.0, abs=1e-12)

    def test_source_side_is_detached(self):
        s = Tensor(maps((1, 2, 4, 4), 13), requires_grad=True)
        i = Tensor(maps((1, 2, 4, 4), 14), requires_grad=True)
        tg.reset_tape()
        tg.backward(ls.residual_loss(s, i, tau=0.3))
        assert s.grad is None
        assert i.grad is not None

    def test_gradient(self):
        src = maps((1, 2, 4, 4), 15)
        t = Tensor(maps((1, 2, 4, 4), 16))
        assert tg.grad_check(lambda x: ls.residual_loss(src, x, tau=0.3), t, eps=EPS) < GRAD_TOL

    def test_tau_contract(self):
        with pytest.raises(ContractViolation):
            ls.residual_loss(maps((1, 1, 4, 4), 0), maps((1, 1, 4, 4), 1), tau=-1.0)


class TestContrastiveLoss:
    def test_orthogonal_closed_form(self):
        # three joints peaked at cells whose x and y projections are disjoint
        # one-hots: cosine similarity matrix is the identity, so the InfoNCE
        # value is log(e + (K-1)) - 1 for every joint
        m = one_hot_stack([0, 5, 10])
        got = ls.contrastive_loss(m, m.copy()).item()
        assert abs(got - 0.5514447139320509) <= 1e-10

    def test_orthogonal_closed_form_heatmap_based(self):
        m = one_hot_stack([0, 5, 10])
        got = ls.contrastive_loss(m, m.copy(), heatmap_based=True).item()
        assert abs(got - 0.5514447139320509) <= 1e-10

    def test_brute_force_vector_similarity(self):
        inn, tgt = maps((2, 3, 4, 4), 17), maps((2, 3, 4, 4), 18)
        got = ls.contrastive_loss(inn, tgt).item()

        def cosmat(a, b):
            an = a / np.linalg.norm(a, axis=-1, keepdims=True)
            bn = b / np.linalg.norm(b, axis=-1, keepdims=True)
            return an @ bn.T

        total = 0.0
        for bi in range(2):
            # per-sample maps are (K, H, W): axis 1 sums rows (x marginal),
            # axis 2 sums columns (y marginal)
            sim = 0.5 * (cosmat(inn[bi].sum(1), tgt[bi].sum(1)) + cosmat(inn[bi].sum(2), tgt[bi].sum(2)))
            for j in range(3):
                total += np.log(np.exp(sim[j]).sum()) - sim[j, j]
        assert abs(got - total / 6.0) <= 1e-10

    def test_intermediate_side_is_detached(self):
        i = Tensor(maps((1, 3, 4, 4), 19), requires_grad=True)
        t = Tensor(maps((1, 3, 4, 4), 20), requires_grad=True)
        tg.reset_tape()
        tg.backward(ls.contrastive_loss(i, t))
        assert i.grad is None
        assert t.grad is not None

    def test_gradient_vector_and_heatmap(self):
        inn = maps((1, 3, 4, 4), 21)
        t = Tensor(maps((1, 3, 4, 4), 22))
        assert tg.grad_check(lambda x: ls.contrastive_loss(inn, x), t, eps=EPS) < GRAD_TOL
        assert tg.grad_check(lambda x: ls.contrastive_loss(inn, x, heatmap_based=True), t, eps=EPS) < GRAD_TOL

    def test_needs_two_joints(self):
        with pytest.raises(ContractViolation):
            ls.contrastive_loss(maps((1, 1, 4, 4), 0), maps((1, 1, 4, 4), 1))


class TestImLoss:
    def test_uniform_maps_give_zero(self):
        # constant maps: both marginal entropies are ln(16); the diversity
        # entropy over 256 cells is ln(256) = 2 ln(16), so the loss cancels
        m = np.full((2, 3, 16, 16), 0.25)
        assert abs(ls.im_loss(m).item()) <= 1e-12

    def test_uniform_maps_give_zero_heatmap_based(self):
        m = np.full((2, 3, 16, 16), 0.25)
        assert abs(ls.im_loss(m, heatmap_based=True).item()) <= 1e-12

    def test_confident_and_diverse_is_low(self):
        diverse = one_hot_stack([0, 5, 10], value=8.0)
        collapsed = one_hot_stack([0, 0, 0], value=8.0)
        assert ls.im_loss(diverse).item() < ls.im_loss(collapsed).item()

    def test_brute_force(self):
        m = maps((2, 3, 4, 4), 23, scale=3.0)
        got = ls.im_loss(m).item()

        def ent(v):
            z = np.exp(v - v.max(axis=-1, keepdims=True))
            p = z / z.sum(axis=-1, keepdims=True)
            return -(p * np.log(p)).sum(axis=-1)

        ent_x = ent(m.sum(axis=2)).mean()
        ent_y = ent(m.sum(axis=3)).mean()
        flat = m.reshape(2, 3, 16)
        z = np.exp(flat - flat.max(axis=-1, keepdims=True))
        p = z / z.sum(axis=-1, keepdims=True)
        q = p.mean(axis=1)
        neg_div = (q * np.log(q)).sum(axis=-1).mean()
        assert abs(got - (ent_x + ent_y + neg_div)) <= 1e-10

    def test_gradient(self):
        t = Tensor(maps((1, 3, 4, 4), 24))
        assert tg.grad_check(lambda x: ls.im_loss(x), t, eps=EPS) < GRAD_TOL
        assert tg.grad_check(lambda x: ls.im_loss(x, heatmap_based=True), t, eps=EPS) < GRAD_TOL


class TestTargetObjective:
    def test_composition(self):
        inn, tgt = maps((1, 3, 4, 4), 25), maps((1, 3, 4, 4), 26)
        w = LossWeights(beta=0.5, gamma=0.85)
        expect = (ls.consistency_loss(inn, tgt).item()
                  + 0.5 * ls.contrastive_loss(inn, tgt).item()
                  + 0.85 * ls.im_loss(tgt).item())
        assert ls.target_objective(inn, tgt, w).item() == pytest.approx(expect, rel=1e-12)

    def test_zero_weights_drop_terms(self):
        inn, tgt = maps((1, 3, 4, 4), 27), maps((1, 3, 4, 4), 28)
        w = LossWeights(beta=0.0, gamma=0.0)
        assert ls.target_objective(inn, tgt, w).item() == pytest.approx(
            ls.consistency_loss(inn, tgt).item())

    def test_gradient_reaches_target_model_only(self):
        i = Tensor(maps((1, 3, 4, 4), 29), requires_grad=True)
        t = Tensor(maps((1, 3, 4, 4), 30), requires_grad=True)
        tg.reset_tape()
        tg.backward(ls.target_objective(i, t, LossWeights()))
        assert i.grad is None
        assert t.grad is not None
