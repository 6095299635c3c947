"""PCK evaluation and the ablation harness.

PCK@k counts a visible joint as correct when the euclidean distance
between the decoded prediction and the ground truth is at most
``k * max(H, W)`` image pixels. Reports aggregate overall and per
skeleton group, all on a 0..100 scale.

``run_ablation`` drives whole train/adapt/evaluate pipelines over shared
seeds for several studies: loss combinations, heatmap- versus
vector-based variants of the contrastive and information terms, framework
steps, and one-at-a-time weight sweeps. Within one seed every row starts
from the same pretrained source model, so rows differ only in the
adaptation recipe.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorgrad as tg
from .adapt import AdaptConfig, Adapter, PretrainConfig, Schedule, pretrain
from .models import ArchConfig, ModelTriplet, PoseNet, build_posenet
from .posemaps import HeatmapSet, Keypoints, decode
from .tensorgrad import ContractViolation, Tensor
from .toydata import SOURCE_STYLE, TARGET_STYLE, DomainStyle, SkeletonSpec, ToyDataset, generate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PckConfig:
    """Threshold ratio and (optional) fixed normalizer in image pixels.

    When ``normalizer`` is None it defaults to max(H, W) of the image
    being evaluated.
    """

    threshold: float = 0.05
    normalizer: float = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ContractViolation("PckConfig: threshold must be in (0, 1)")
        if self.normalizer is not None and self.normalizer <= 0:
            raise ContractViolation("PckConfig: normalizer must be positive")

    def resolve_normalizer(self, image_size) -> float:
        if self.normalizer is not None:
            return float(self.normalizer)
        return float(max(image_size[0], image_size[1]))


def pck(pred: Keypoints, gt: Keypoints, cfg: PckConfig = PckConfig(), image_size=(64, 64)) -> np.ndarray:
    """Per-joint correctness; entries for invisible ground truth are False."""
    if pred.count != gt.count:
        raise ContractViolation(f"pck: keypoint counts differ, {pred.count} vs {gt.count}")
    limit = cfg.threshold * cfg.resolve_normalizer(image_size)
    dist = np.linalg.norm(pred.coords - gt.coords, axis=1)
    return (dist <= limit) & gt.visibility


@dataclass
class EvalReport:
    """PCK summary of one model on one dataset, 0..100 scale."""

    model_id: str
    sample_count: int
    overall: float
    group_pck: dict
    group_correct: dict
    group_visible: dict

    def csv_header(self):
        return ["model_id", "samples", "overall"] + list(self.group_pck.keys())

    def csv_row(self):
        return [self.model_id, str(self.sample_count), repr(self.overall)] + [
            repr(v) for v in self.group_pck.values()
        ]


def evaluate(net: PoseNet, dataset: ToyDataset, cfg: PckConfig = PckConfig(),
             model_id: str = "model", batch_size: int = 64) -> EvalReport:
    """Forward the dataset, decode predictions and aggregate PCK."""
    if len(dataset) == 0:
        raise ContractViolation("evaluate: empty dataset")
    groups = list(dict.fromkeys(dataset.skeleton.groups))
    correct = {g: 0 for g in groups}
    visible = {g: 0 for g in groups}
    size = (dataset.image_size, dataset.image_size)
    labels = dataset.skeleton.groups
    tg.reset_tape()
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        with tg.no_grad():
            out = net.forward(Tensor(images))
        for local, sample in enumerate(chunk):
            maps = HeatmapSet(maps=out.data[local], image_size=size)
            ok = pck(decode(maps), sample.keypoints, cfg, image_size=size)
            for j, g in enumerate(labels):
                if sample.keypoints.visibility[j]:
                    visible[g] += 1
                    correct[g] += int(ok[j])
    total_visible = sum(visible.values())
    total_correct = sum(correct.values())
    if total_visible == 0:
        raise ContractViolation("evaluate: no visible keypoints in dataset")
    group_pck = {g: (100.0 * correct[g] / visible[g] if visible[g] else 0.0) for g in groups}
    return EvalReport(
        model_id=model_id,
        sample_count=len(dataset),
        overall=100.0 * total_correct / total_visible,
        group_pck=group_pck,
        group_correct=correct,
        group_visible=visible,
    )


@dataclass(frozen=True)
class AblationConfig:
    """One shared recipe for every ablation row.

    Rows reuse the same datasets and pretrained source per seed; the
    weight grids drive the one-at-a-time parameter study.
    """

    seeds: tuple = (0, 1, 2, 3, 4)
    studies: tuple = ("losses", "sparsity", "framework", "params")
    train_count: int = 400
    eval_count: int = 100
    skeleton: SkeletonSpec = field(default_factory=SkeletonSpec)
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE
    generalization_style: DomainStyle = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    schedule: Schedule = field(default_factory=Schedule)
    pck: PckConfig = field(default_factory=PckConfig)
    alpha_grid: tuple = (0.5, 0.7, 0.9)
    beta_grid: tuple = (0.3, 0.5, 0.7)
    gamma_grid: tuple = (0.65, 0.85, 1.0)

    def __post_init__(self):
        if not self.seeds:
            raise ContractViolation("AblationConfig: need at least one seed")
        unknown = set(self.studies) - {"losses", "sparsity", "framework", "params"}
        if unknown:
            raise ContractViolation(f"AblationConfig: unknown studies {sorted(unknown)}")


@dataclass
class StudyRow:
    config_id: str
    reports: list

    @property
    def mean_overall(self) -> float:
        return float(np.mean([r.overall for r in self.reports]))

    def mean_groups(self) -> dict:
        groups = self.reports[0].group_pck.keys()
        return {g: float(np.mean([r.group_pck[g] for r in self.reports])) for g in groups}


@dataclass
class StudyTable:
    name: str
    rows: list

    def row(self, config_id: str) -> StudyRow:
        for r in self.rows:
            if r.config_id == config_id:
                return r
        raise KeyError(config_id)

    def to_csv(self) -> str:
        buf = io.StringIO()
        groups = list(self.rows[0].reports[0].group_pck.keys())
        buf.write(",".join(["config", "seed", "overall"] + groups) + "\n")
        for row in self.rows:
            for seed, rep in zip(_report_seeds(row), row.reports):
                cells = [row.config_id, str(seed), repr(rep.overall)]
                cells += [repr(rep.group_pck[g]) for g in groups]
                buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def to_markdown(self) -> str:
        groups = list(self.rows[0].reports[0].group_pck.keys())
        lines = [
            "| Method | " + " | ".join(groups) + " | All |",
            "|" + "---|" * (len(groups) + 2),
        ]
        for row in self.rows:
            means = row.mean_groups()
            cells = [row.config_id] + [f"{means[g]:.1f}" for g in groups] + [f"{row.mean_overall:.1f}"]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _report_seeds(row: StudyRow):
    return [rep.model_id.rsplit("seed", 1)[-1] for rep in row.reports]


def _loss_rows():
    off = dict(use_residual=False, use_contrastive=False, use_infomax=False)
    return [
        ("baseline", off),
        ("residual", dict(off, use_residual=True)),
        ("contrastive", dict(off, use_contrastive=True)),
        ("infomax", dict(off, use_infomax=True)),
        ("contrastive_infomax", dict(off, use_contrastive=True, use_infomax=True)),
        ("full", {}),
    ]


def _sparsity_rows():
    off = dict(use_residual=False, use_contrastive=False, use_infomax=False)
    return [
        ("baseline", off),
        ("hbcl", dict(off, use_contrastive=True, contrastive_on_heatmaps=True)),
        ("vbcl", dict(off, use_contrastive=True)),
        ("hbim", dict(off, use_infomax=True, infomax_on_heatmaps=True)),
        ("vbim", dict(off, use_infomax=True)),
    ]


def _framework_rows():
    return [
        ("step_a_only", dict(enable_step_b=False)),
        ("step_b_only", dict(enable_step_a=False)),
        ("full", {}),
    ]


def _param_rows(cfg: AblationConfig):
    rows = [("defaults", {})]
    base = cfg.adapt.weights
    for a in cfg.alpha_grid:
        if a != base.alpha:
            rows.append((f"alpha={a:g}", dict(weights=replace(base, alpha=a))))
    for b in cfg.beta_grid:
        if b != base.beta:
            rows.append((f"beta={b:g}", dict(weights=replace(base, beta=b))))
    for g in cfg.gamma_grid:
        if g != base.gamma:
            rows.append((f"gamma={g:g}", dict(weights=replace(base, gamma=g))))
    return rows


class _SeedContext:
    """Datasets, pretrained source and cached adaptations for one seed."""

    def __init__(self, cfg: AblationConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.source_train = generate(cfg.skeleton, cfg.source_style, cfg.train_count, seed,
                                     cfg.arch.image_size, domain="source")
        self.target_train = generate(cfg.skeleton, cfg.target_style, cfg.train_count, seed + 1000,
                                     cfg.arch.image_size, domain="target")
        self.target_eval = generate(cfg.skeleton, cfg.target_style, cfg.eval_count, seed + 2000,
                                    cfg.arch.image_size, domain="target")
        self.extra_eval = None
        if cfg.generalization_style is not None:
            self.extra_eval = generate(cfg.skeleton, cfg.generalization_style, cfg.eval_count,
                                       seed + 3000, cfg.arch.image_size, domain="shifted")
        net = build_posenet(cfg.arch, seed=seed)
        self.source = pretrain(net, self.source_train, replace(cfg.pretrain, seed=seed), cfg.schedule)
        self._cache = {}

    def adapted_report(self, config_id: str, overrides: dict) -> EvalReport:
        # identical override sets (e.g. "full" and "defaults") share one run
        key = repr(sorted(overrides.items(), key=lambda kv: kv[0]))
        if key not in self._cache:
            adapt_cfg = replace(self.cfg.adapt, seed=self.seed, **overrides)
            triplet = ModelTriplet.from_source(self.source.clone())
            Adapter(triplet, adapt_cfg, self.cfg.schedule).run(self.target_train)
            self._cache[key] = evaluate(triplet.intermediate, self.target_eval, self.cfg.pck,
                                        model_id=f"{config_id}.seed{self.seed}")
        return self._cache[key]

    def source_report(self) -> EvalReport:
        return evaluate(self.source, self.target_eval, self.cfg.pck, model_id=f"source_only.seed{self.seed}")


def run_ablation(cfg: AblationConfig = AblationConfig(), out_dir=None) -> dict:
    """Run the configured studies; returns study name -> StudyTable.

    With ``out_dir`` set, each table is also written as CSV and Markdown.
    """
    contexts = []
    for seed in cfg.seeds:
        logger.info("ablation: preparing seed %d", seed)
        contexts.append(_SeedContext(cfg, seed))
    studies = {}
    for study in cfg.studies:
        if study == "losses":
            specs = _loss_rows()
        elif study == "sparsity":
            specs = _sparsity_rows()
        elif study == "framework":
            specs = _framework_rows()
        else:
            specs = _param_rows(cfg)
        rows = [StudyRow("source_only", [ctx.source_report() for ctx in contexts])]
        for config_id, overrides in specs:
            logger.info("ablation: study %s row %s", study, config_id)
            rows.append(StudyRow(config_id, [ctx.adapted_report(config_id, overrides) for ctx in contexts]))
        studies[study] = StudyTable(study, rows)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for name, table in studies.items():
            with open(os.path.join(out_dir, f"ablation_{name}.csv"), "w") as fh:
                fh.write(table.to_csv())
            with open(os.path.join(out_dir, f"ablation_{name}.md"), "w") as fh:
                fh.write(table.to_markdown())
    return studies
