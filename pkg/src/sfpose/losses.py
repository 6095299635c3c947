"""Adaptation objectives over predicted heatmap stacks.

Every loss accepts heatmap stacks shaped (B, K, H', W'), or (K, H', W')
which is promoted to batch size 1, as ``Tensor``, ndarray or
``HeatmapSet``, and returns a scalar tensor on the active tape.

Gradient routing is part of each loss's contract. ``finetune_loss`` and
``mse_heatmap`` are live on both sides. ``residual_loss`` treats the
source-model side as a constant, ``consistency_loss`` and
``contrastive_loss`` treat the intermediate-model side as a constant,
and ``im_loss`` has a single live input. Detaching inside the loss keeps
that routing correct no matter how callers wire the models together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .posemaps import HeatmapSet, residual_support
from .tensorgrad import ContractViolation, Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objectives plus the residual temperature.

    ``alpha`` scales the residual term next to the finetune term,
    ``beta`` and ``gamma`` scale the contrastive and information terms
    next to the consistency term, ``tau`` is the residual softmax
    temperature. Zero weights are allowed so single terms can be ablated;
    the temperature must stay positive.
    """

    alpha: float = 0.7
    beta: float = 0.5
    gamma: float = 0.85
    tau: float = 0.3

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"LossWeights: {name} must be >= 0")
        if self.tau <= 0:
            raise ContractViolation("LossWeights: tau must be positive")


def _as_batched(x, name: str) -> Tensor:
    if isinstance(x, HeatmapSet):
        x = x.maps
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 3:
        t = tg.reshape(t, (1,) + t.shape)
    if t.ndim != 4:
        raise ContractViolation(f"{name}: expected (B, K, H', W') heatmaps, got {t.shape}")
    return t


def _log_softmax(t: Tensor, axis: int) -> Tensor:
    # the subtracted max is a constant shift, which leaves the gradient exact
    m = Tensor(t.data.max(axis=axis, keepdims=True))
    z = t - m
    return z - tg.log(tg.sum(tg.exp(z), axis=axis, keepdims=True))


def _softmax_entropy(t: Tensor, axis: int) -> Tensor:
    """Shannon entropy of softmax(t) along ``axis``, other axes kept."""
    p = tg.softmax(t, axis=axis)
    return -tg.sum(p * _log_softmax(t, axis), axis=axis)


def _cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities of (B, K, D) rows: result (B, K, K)."""
    an = a / (tg.l2_norm(a, axis=-1, keepdims=True) + 1e-12)
    bn = b / (tg.l2_norm(b, axis=-1, keepdims=True) + 1e-12)
    return tg.matmul(an, tg.transpose(bn, (0, 2, 1)))


def mse_heatmap(pred, target) -> Tensor:
    """Squared error summed per map, averaged over batch and joints.

    Summing over cells (rather than averaging) keeps the heatmap terms
    on a comparable numeric scale to the divergence-style losses, so the
    documented trade-off weights act as genuine trade-offs.
    """
    p = _as_batched(pred, "mse_heatmap")
    t = _as_batched(target, "mse_heatmap")
    if p.shape != t.shape:
        raise ContractViolation(f"mse_heatmap: shape mismatch {p.shape} vs {t.shape}")
    d = p - t
    return tg.sum(d * d) / float(p.shape[0] * p.shape[1])


def finetune_loss(src_out, in_out) -> Tensor:
    """MSE between source-model and intermediate-model heatmaps on a
    target-domain batch; gradients flow into both models."""
    return mse_heatmap(src_out, in_out)


def consistency_loss(in_out, tg_out) -> Tensor:
    """MSE pulling the target model toward the (constant) intermediate."""
    i = _as_batched(in_out, "consistency_loss").detach()
    t = _as_batched(tg_out, "consistency_loss")
    if i.shape != t.shape:
        raise ContractViolation(f"consistency_loss: shape mismatch {i.shape} vs {t.shape}")
    return mse_heatmap(i, t)


def residual_loss(src_out, in_out, tau: float = 0.3) -> Tensor:
    """KL divergence between masked residual distributions, averaged over
    batch and joints.

    For each (sample, joint) pair the argmax cell of each model's map is
    excluded from both supports, the survivors are softmaxed at
    temperature ``tau``, and KL(src || in) is taken with the source side
    constant, so gradient reaches the intermediate model only.
    """
    if tau <= 0:
        raise ContractViolation(f"residual_loss: tau must be positive, got {tau}")
    s = _as_batched(src_out, "residual_loss").detach()
    i = _as_batched(in_out, "residual_loss")
    if s.shape != i.shape:
        raise ContractViolation(f"residual_loss: shape mismatch {s.shape} vs {i.shape}")
    b, k = s.shape[0], s.shape[1]
    terms = []
    for bi in range(b):
        for ki in range(k):
            v_src, v_in, _ = residual_support(s[bi, ki], i[bi, ki])
            ls_src = _log_softmax(v_src / tau, axis=0)
            ls_in = _log_softmax(v_in / tau, axis=0)
            p_src = tg.exp(ls_src)
            terms.append(tg.sum(p_src * (ls_src - ls_in), axis=0))
    return tg.mean(tg.stack(terms))


def _similarity(in_maps: Tensor, tg_maps: Tensor, heatmap_based: bool) -> Tensor:
    b, k = in_maps.shape[0], in_maps.shape[1]
    hw = in_maps.shape[2] * in_maps.shape[3]
    if heatmap_based:
        fi = tg.reshape(in_maps, (b, k, hw))
        ft = tg.reshape(tg_maps, (b, k, hw))
        return _cosine_matrix(fi, ft)
    sim_x = _cosine_matrix(tg.sum(in_maps, axis=2), tg.sum(tg_maps, axis=2))
    sim_y = _cosine_matrix(tg.sum(in_maps, axis=3), tg.sum(tg_maps, axis=3))
    return (sim_x + sim_y) * 0.5


def contrastive_loss(in_out, tg_out, heatmap_based: bool = False) -> Tensor:
    """InfoNCE over per-joint similarities between the two models.

    Similarity of joints (j, k) is the mean cosine of their x and y
    heatmap projections (or of the flattened heatmaps when
    ``heatmap_based``). Joint j of the target model is pulled toward
    joint j of the constant intermediate model and pushed from the
    others. Requires at least two joints.
    """
    i = _as_batched(in_out, "contrastive_loss").detach()
    t = _as_batched(tg_out, "contrastive_loss")
    if i.shape != t.shape:
        raise ContractViolation(f"contrastive_loss: shape mismatch {i.shape} vs {t.shape}")
    b, k = t.shape[0], t.shape[1]
    if k < 2:
        raise ContractViolation("contrastive_loss: need at least 2 keypoints")
    sim = _similarity(i, t, heatmap_based)
    lse = tg.log(tg.sum(tg.exp(sim), axis=2))
    eye = np.broadcast_to(np.eye(k, dtype=bool), (b, k, k))
    pos = tg.reshape(tg.masked_select(sim, np.ascontiguousarray(eye)), (b, k))
    return tg.mean(lse - pos)


def im_loss(tg_out, heatmap_based: bool = False) -> Tensor:
    """Information maximization: confident marginals, diverse peaks.

    The certainty terms are the mean entropies of the softmaxed x and y
    projections of each joint map (or of the softmaxed flattened map when
    ``heatmap_based``). The diversity term is the entropy of the
    joint-averaged softmax heatmap, which is subtracted, so the loss
    rewards per-joint confidence while spreading different joints over
    different cells.
    """
    t = _as_batched(tg_out, "im_loss")
    b, k, h, w = t.shape
    if heatmap_based:
        certainty = tg.mean(_softmax_entropy(tg.reshape(t, (b, k, h * w)), axis=2))
    else:
        ent_x = tg.mean(_softmax_entropy(tg.sum(t, axis=2), axis=2))
        ent_y = tg.mean(_softmax_entropy(tg.sum(t, axis=3), axis=2))
        certainty = ent_x + ent_y
    q = tg.mean(tg.softmax(tg.reshape(t, (b, k, h * w)), axis=2), axis=1)
    # sum of q log q is -H(q); the tiny bias keeps log defined when a cell underflows
    neg_div = tg.mean(tg.sum(q * tg.log(q + 1e-300), axis=1))
    return certainty + neg_div


def target_objective(in_out, tg_out, w: LossWeights, *, contrastive_on_heatmaps: bool = False,
                     infomax_on_heatmaps: bool = False) -> Tensor:
    """Combined target-model objective: consistency + beta * contrastive
    + gamma * infomax. Gradient reaches the target model only."""
    loss = consistency_loss(in_out, tg_out)
    if w.beta != 0.0:
        loss = loss + w.beta * contrastive_loss(in_out, tg_out, heatmap_based=contrastive_on_heatmaps)
    if w.gamma != 0.0:
        loss = loss + w.gamma * im_loss(tg_out, heatmap_based=infomax_on_heatmaps)
    return loss
