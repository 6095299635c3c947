"""Unit tests for PCK evaluation and the ablation harness."""

import numpy as np
import pytest

from sfpose import posemaps as pm
from sfpose.adapt import AdaptConfig, PretrainConfig
from sfpose.evalkit import (
    AblationConfig,
    EvalReport,
    PckConfig,
    StudyRow,
    StudyTable,
    evaluate,
    pck,
    run_ablation,
)
from sfpose.models import ArchConfig, build_posenet
from sfpose.posemaps import Keypoints
from sfpose.tensorgrad import ContractViolation
from sfpose.toydata import SOURCE_STYLE, SkeletonSpec, ToyDataset, generate


def kps(*points, vis=None):
    return Keypoints(coords=np.array(points, dtype=np.float64), visibility=vis)


class TestPck:
    def test_identity_is_correct(self):
        gt = kps((10.0, 10.0), (50.0, 20.0))
        assert pck(gt, gt).tolist() == [True, True]

    def test_boundary_at_3_2_pixels_inclusive(self):
        gt = kps((0.0, 30.0), (0.0, 30.0), (0.0, 30.0))
        # distances measured from x=0 are exactly representable, so the
        # middle keypoint sits exactly on the 0.05 * 64 = 3.2 px limit
        pred = kps((3.19, 30.0), (3.2, 30.0), (3.21, 30.0))
        assert pck(pred, gt).tolist() == [True, True, False]

    def test_opposite_corners_all_wrong(self):
        gt = kps((63.0, 63.0))
        pred = kps((0.0, 0.0))
        assert pck(pred, gt).tolist() == [False]

    def test_invisible_gt_never_counts(self):
        gt = kps((10.0, 10.0), (20.0, 20.0), vis=[True, False])
        assert pck(gt, gt).tolist() == [True, False]

    def test_fixed_normalizer(self):
        gt = kps((30.0, 30.0))
        pred = kps((31.5, 30.0))
        tight = PckConfig(threshold=0.05, normalizer=20.0)  # limit 1.0 px
        assert pck(pred, gt, tight).tolist() == [False]

    def test_count_mismatch(self):
        with pytest.raises(ContractViolation):
            pck(kps((1.0, 1.0)), kps((1.0, 1.0), (2.0, 2.0)))

    def test_config_contracts(self):
        with pytest.raises(ContractViolation):
            PckConfig(threshold=0.0)
        with pytest.raises(ContractViolation):
            PckConfig(normalizer=-1.0)


class _GroundTruthNet:
    """Stand-in network that emits the encoded GT heatmaps of a dataset."""

    def __init__(self, dataset):
        self.cfg = ArchConfig()
        self._lookup = {}
        for s in dataset:
            maps = pm.encode(s.keypoints, 16, 16).maps
            self._lookup[s.image.tobytes()] = maps

    def forward(self, x):
        from sfpose.tensorgrad import Tensor
        outs = [self._lookup[np.ascontiguousarray(img).tobytes()] for img in x.data]
        return Tensor(np.stack(outs))


class TestEvaluate:
    def test_ground_truth_heatmaps_score_100(self):
        ds = generate(SkeletonSpec(), SOURCE_STYLE, 10, seed=0)
        report = evaluate(_GroundTruthNet(ds), ds)
        assert report.overall == 100.0
        assert all(v == 100.0 for v in report.group_pck.values())

    def test_chunked_equals_single_batch(self):
        ds = generate(SkeletonSpec(), SOURCE_STYLE, 7, seed=1)
        net = build_posenet(ArchConfig(), seed=0)
        a = evaluate(net, ds, batch_size=2)
        b = evaluate(net, ds, batch_size=64)
        assert a.overall == b.overall
        assert a.group_pck == b.group_pck

    def test_overall_aggregates_visible_weighted(self):
        ds = generate(SkeletonSpec(), SOURCE_STYLE, 5, seed=2)
        report = evaluate(build_posenet(ArchConfig(), seed=0), ds)
        total_vis = sum(report.group_visible.values())
        total_cor = sum(report.group_correct.values())
        assert total_vis == 5 * 5
        assert report.overall == pytest.approx(100.0 * total_cor / total_vis)

    def test_csv_header_and_row_are_lists(self):
        ds = generate(SkeletonSpec(), SOURCE_STYLE, 3, seed=3)
        report = evaluate(build_posenet(ArchConfig(), seed=0), ds, model_id="m1")
        header, row = report.csv_header(), report.csv_row()
        assert isinstance(header, list) and isinstance(row, list)
        assert header[:3] == ["model_id", "samples", "overall"]
        assert row[0] == "m1" and row[1] == "3"
        assert len(header) == len(row)

    def test_empty_dataset_rejected(self):
        empty = ToyDataset(skeleton=SkeletonSpec(), style=SOURCE_STYLE, seed=0,
                           image_size=64, domain="source", samples=[])
        with pytest.raises(ContractViolation):
            evaluate(build_posenet(ArchConfig(), seed=0), empty)


@pytest.fixture(scope="module")
def tiny_tables():
    cfg = AblationConfig(
        seeds=(0,),
        studies=("losses", "params"),
        train_count=6,
        eval_count=4,
        pretrain=PretrainConfig(epochs=1, batch_size=4),
        adapt=AdaptConfig(epochs=1, iters_per_epoch=2, batch_size=4),
        alpha_grid=(0.7, 0.9),
        beta_grid=(0.5,),
        gamma_grid=(0.85,),
    )
    return run_ablation(cfg)


class TestAblation:
    def test_study_tables_and_rows(self, tiny_tables):
        assert set(tiny_tables) == {"losses", "params"}
        losses = tiny_tables["losses"]
        ids = [r.config_id for r in losses.rows]
        assert ids == ["source_only", "baseline", "residual", "contrastive",
                       "infomax", "contrastive_infomax", "full"]
        params = tiny_tables["params"]
        assert [r.config_id for r in params.rows] == ["source_only", "defaults", "alpha=0.9"]

    def test_rows_cover_all_seeds(self, tiny_tables):
        for table in tiny_tables.values():
            for row in table.rows:
                assert len(row.reports) == 1

    def test_csv_and_markdown_render(self, tiny_tables):
        table = tiny_tables["losses"]
        csv = table.to_csv()
        assert csv.splitlines()[0].startswith("config,seed,overall")
        assert len(csv.splitlines()) == 1 + len(table.rows)
        md = table.to_markdown()
        assert md.startswith("| Method |")
        assert "| full |" in md

    def test_row_lookup(self, tiny_tables):
        table = tiny_tables["losses"]
        assert table.row("full").config_id == "full"
        with pytest.raises(KeyError):
            table.row("nope")

    def test_mean_helpers(self, tiny_tables):
        row = tiny_tables["losses"].row("baseline")
        assert 0.0 <= row.mean_overall <= 100.0
        assert set(row.mean_groups()) == set(row.reports[0].group_pck)

    def test_config_contracts(self):
        with pytest.raises(ContractViolation):
            AblationConfig(seeds=())
        with pytest.raises(ContractViolation):
            AblationConfig(studies=("losses", "bogus"))
