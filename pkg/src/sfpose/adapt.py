"""Source pretraining and the two-step source-free adaptation loop.

Each adaptation iteration runs two phases on one unlabeled target batch:

* Step A (source-protect): the source and intermediate models predict the
  batch; their mutual MSE plus ``alpha`` times the residual KL is
  backpropagated once. The source regressor follows the plain MSE
  gradient (the residual term is constant on the source side) and the
  intermediate extractor follows the full objective. The source
  extractor and intermediate regressor stay frozen.
* Step B (target-relevant): the target model is trained against the
  constant intermediate predictions with the combined consistency,
  contrastive and information objectives, then the whole intermediate
  model absorbs the target model by exponential moving average.

Parameter routing, fixed by construction: the source extractor never
changes; the source regressor changes only in step A; the intermediate
extractor changes in step A by backprop and in step B by EMA; the
intermediate regressor changes only by EMA; the target model changes
only in step B.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorgrad as tg
from .losses import LossWeights, consistency_loss, contrastive_loss, finetune_loss, im_loss, mse_heatmap, residual_loss
from .models import EmaConfig, ModelTriplet, PoseNet, ema_update
from .posemaps import DEFAULT_SIGMA, encode
from .tensorgrad import ContractViolation, Tensor

logger = logging.getLogger(__name__)

LOG_KEYS = ("iter", "lr_groups", "l_ft", "l_res", "l_con", "l_cst", "l_im")


class Adam(object):
    """Adam over a named parameter group, stepped with an external lr."""

    def __init__(self, params, base_lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.base_lr = base_lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr=None):
        if lr is None:
            lr = self.base_lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class Schedule:
    """Learning rates for every parameter group plus the anneal policy.

    Adaptation rates decay as ``lr(t) = base * (1 + anneal_a * t) **
    (-anneal_b)`` over iterations; pretraining uses a constant rate that
    drops once at ``pretrain_drop_epoch``.
    """

    lr_source_regressor: float = 1e-4
    lr_intermediate_extractor: float = 1e-5
    lr_target_extractor: float = 1e-4
    lr_target_regressor: float = 1e-3
    pretrain_lr: float = 1e-4
    pretrain_dropped_lr: float = 1e-5
    pretrain_drop_epoch: int = 25
    anneal_a: float = 1e-4
    anneal_b: float = 0.75

    def __post_init__(self):
        for name in ("lr_source_regressor", "lr_intermediate_extractor", "lr_target_extractor",
                     "lr_target_regressor", "pretrain_lr", "pretrain_dropped_lr"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"Schedule: {name} must be positive")
        if self.anneal_a < 0 or self.anneal_b < 0:
            raise ContractViolation("Schedule: anneal constants must be non-negative")

    def anneal(self, base: float, t: int) -> float:
        return base * (1.0 + self.anneal_a * t) ** (-self.anneal_b)

    def pretrain_epoch_lr(self, epoch: int) -> float:
        return self.pretrain_lr if epoch < self.pretrain_drop_epoch else self.pretrain_dropped_lr


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("PretrainConfig: bad counts")


@dataclass(frozen=True)
class AdaptConfig:
    """Toy-benchmark adaptation defaults: 20 epochs of 50 iterations."""

    epochs: int = 20
    iters_per_epoch: int = 50
    batch_size: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ema: EmaConfig = field(default_factory=EmaConfig)
    use_residual: bool = True
    use_contrastive: bool = True
    use_infomax: bool = True
    contrastive_on_heatmaps: bool = False
    infomax_on_heatmaps: bool = False
    enable_step_a: bool = True
    enable_step_b: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ContractViolation("AdaptConfig: bad counts")


def _sample_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float64)


def _sample_targets(samples, heatmap_size: int, sigma: float, image_size: int) -> np.ndarray:
    maps = [
        encode(s.keypoints, heatmap_size, heatmap_size, sigma=sigma, image_size=(image_size, image_size)).maps
        for s in samples
    ]
    return np.stack(maps)


def pretrain(net: PoseNet, source_data, cfg: PretrainConfig = PretrainConfig(),
             schedule: Schedule = Schedule()) -> PoseNet:
    """Supervised MSE training of the full network on labeled source data."""
    samples = list(source_data)
    if not samples:
        raise ContractViolation("pretrain: empty dataset")
    images = _sample_images(samples)
    targets = _sample_targets(samples, net.cfg.heatmap_size, cfg.sigma, net.cfg.image_size)
    net.set_trainable(extractor=True, regressor=True)
    opt = Adam(net.params, base_lr=schedule.pretrain_lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    tg.reset_tape()
    for epoch in range(cfg.epochs):
        lr = schedule.pretrain_epoch_lr(epoch)
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = mse_heatmap(net.forward(Tensor(images[idx])), Tensor(targets[idx]))
            tg.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            total += loss.item()
            batches += 1
        logger.info("pretrain epoch %d lr %.2e mse %.5f", epoch, lr, total / batches)
    return net


class Adapter:
    """Owns the triplet, per-group optimizers and the iteration counter."""

    def __init__(self, triplet: ModelTriplet, cfg: AdaptConfig = AdaptConfig(),
                 schedule: Schedule = Schedule()):
        for name, net in triplet.nets().items():
            if net.cfg != triplet.source.cfg:
                raise ContractViolation(f"Adapter: {name} model architecture differs from source")
        self.triplet = triplet
        self.cfg = cfg
        self.schedule = schedule
        self.iteration = 0
        triplet.source.set_trainable(extractor=False, regressor=True)
        triplet.intermediate.set_trainable(extractor=True, regressor=False)
        triplet.target.set_trainable(extractor=True, regressor=True)
        self.opt_source_regressor = Adam(triplet.source.regressor_params, schedule.lr_source_regressor)
        self.opt_intermediate_extractor = Adam(triplet.intermediate.extractor_params,
                                               schedule.lr_intermediate_extractor)
        self.opt_target_extractor = Adam(triplet.target.extractor_params, schedule.lr_target_extractor)
        self.opt_target_regressor = Adam(triplet.target.regressor_params, schedule.lr_target_regressor)

    def lr_groups(self) -> dict:
        t = self.iteration
        s = self.schedule
        return {
            "source_regressor": s.anneal(s.lr_source_regressor, t),
            "intermediate_extractor": s.anneal(s.lr_intermediate_extractor, t),
            "target_extractor": s.anneal(s.lr_target_extractor, t),
            "target_regressor": s.anneal(s.lr_target_regressor, t),
        }

    def step_a(self, images) -> tuple:
        """Source-protect update; returns (l_ft, l_res) values."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        lrs = self.lr_groups()
        src_out = self.triplet.source.forward(images)
        in_out = self.triplet.intermediate.forward(images)
        l_ft = finetune_loss(src_out, in_out)
        if self.cfg.use_residual:
            l_res = residual_loss(src_out, in_out, tau=self.cfg.weights.tau)
            total = l_ft + self.cfg.weights.alpha * l_res
            l_res_val = l_res.item()
        else:
            total = l_ft
            l_res_val = 0.0
        tg.backward(total)
        self.opt_source_regressor.step(lrs["source_regressor"])
        self.opt_intermediate_extractor.step(lrs["intermediate_extractor"])
        self.opt_source_regressor.zero_grad()
        self.opt_intermediate_extractor.zero_grad()
        return l_ft.item(), l_res_val

    def step_b(self, images) -> tuple:
        """Target-relevant update plus EMA; returns (l_con, l_cst, l_im) values."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        lrs = self.lr_groups()
        with tg.no_grad():
            in_out = self.triplet.intermediate.forward(images)
        tg_out = self.triplet.target.forward(images)
        l_con = consistency_loss(in_out, tg_out)
        total = l_con
        l_cst_val = l_im_val = 0.0
        if self.cfg.use_contrastive:
            l_cst = contrastive_loss(in_out, tg_out, heatmap_based=self.cfg.contrastive_on_heatmaps)
            total = total + self.cfg.weights.beta * l_cst
            l_cst_val = l_cst.item()
        if self.cfg.use_infomax:
            l_im = im_loss(tg_out, heatmap_based=self.cfg.infomax_on_heatmaps)
            total = total + self.cfg.weights.gamma * l_im
            l_im_val = l_im.item()
        tg.backward(total)
        self.opt_target_extractor.step(lrs["target_extractor"])
        self.opt_target_regressor.step(lrs["target_regressor"])
        self.opt_target_extractor.zero_grad()
        self.opt_target_regressor.zero_grad()
        ema_update(self.triplet.intermediate, self.triplet.target, self.cfg.ema.eta)
        return l_con.item(), l_cst_val, l_im_val

    def run(self, target_data, log_stream=None, on_phase=None) -> ModelTriplet:
        """Full interleaved loop over unlabeled target samples.

        ``on_phase``, when given, is called as ``on_phase("a", iteration)``
        after each source-protect update and ``on_phase("b", iteration)``
        after each target-relevant update (post-EMA), so external monitors
        can audit which parameter groups moved in each phase.
        """
        samples = list(target_data)
        if not samples:
            raise ContractViolation("Adapter.run: empty dataset")
        images = _sample_images(samples)
        rng = np.random.default_rng(self.cfg.seed)
        n = len(samples)
        tg.reset_tape()
        for epoch in range(self.cfg.epochs):
            for _ in range(self.cfg.iters_per_epoch):
                idx = rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
                batch = Tensor(images[idx])
                l_ft = l_res = 0.0
                if self.cfg.enable_step_a:
                    l_ft, l_res = self.step_a(batch)
                    if on_phase is not None:
                        on_phase("a", self.iteration)
                l_con = l_cst = l_im = 0.0
                if self.cfg.enable_step_b:
                    l_con, l_cst, l_im = self.step_b(batch)
                    if on_phase is not None:
                        on_phase("b", self.iteration)
                if log_stream is not None:
                    record = {
                        "iter": self.iteration,
                        "lr_groups": self.lr_groups(),
                        "l_ft": l_ft,
                        "l_res": l_res,
                        "l_con": l_con,
                        "l_cst": l_cst,
                        "l_im": l_im,
                    }
                    log_stream.write(json.dumps(record) + "\n")
                self.iteration += 1
            logger.info("adapt epoch %d/%d done (iter %d)", epoch + 1, self.cfg.epochs, self.iteration)
        return self.triplet


def adapt_loop(triplet: ModelTriplet, target_data, cfg: AdaptConfig = AdaptConfig(),
               schedule: Schedule = Schedule(), log_stream=None) -> ModelTriplet:
    """Convenience wrapper: build an ``Adapter`` and run it to completion."""
    return Adapter(triplet, cfg, schedule).run(target_data, log_stream=log_stream)


def make_adapt_config(**overrides) -> AdaptConfig:
    """AdaptConfig with keyword overrides, nested dataclasses included."""
    cfg = AdaptConfig()
    weight_keys = {k: v for k, v in overrides.items() if k in ("alpha", "beta", "gamma", "tau")}
    rest = {k: v for k, v in overrides.items() if k not in weight_keys}
    if weight_keys:
        rest["weights"] = replace(cfg.weights, **weight_keys)
    return replace(cfg, **rest)
