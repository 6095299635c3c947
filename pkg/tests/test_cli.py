"""End-to-end tests for the command-line pipeline."""

import json
import os

import pytest

from sfpose import cli
from sfpose.cli import (
    EXIT_CHECKPOINT,
    EXIT_DATASET,
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_SCHEMA,
    ConfigSchemaError,
    RunConfig,
    load_config,
    main,
)

TINY = {
    "generate": {"train_count": 10, "eval_count": 6},
    "pretrain": {"epochs": 2, "batch_size": 4},
    "adapt": {"epochs": 1, "iters_per_epoch": 3, "batch_size": 4},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return main(list(argv))


@pytest.fixture()
def pipeline(tmp_path, tiny_config):
    out = str(tmp_path / "run")
    for command in ("generate", "pretrain", "adapt", "eval"):
        assert run(command, "--config", tiny_config, "--out", out) == EXIT_OK
    return out


class TestConfigLoading:
    def test_defaults_without_config(self):
        cfg = load_config(None)
        assert cfg == RunConfig()

    def test_valid_overrides(self, tiny_config):
        cfg = load_config(tiny_config)
        assert cfg.generate.train_count == 10
        assert cfg.adapt.iters_per_epoch == 3
        assert cfg.pretrain.epochs == 2

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pretrain": {"epoch": 1}}))
        with pytest.raises(ConfigSchemaError):
            load_config(str(path))

    def test_wrong_type_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": "zero"}))
        with pytest.raises(ConfigSchemaError):
            load_config(str(path))

    def test_bool_is_not_an_int(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": True}))
        with pytest.raises(ConfigSchemaError):
            load_config(str(path))

    def test_nested_contract_violation_becomes_schema_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"adapt": {"batch_size": 0}}))
        with pytest.raises(ConfigSchemaError):
            load_config(str(path))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{oops")
        with pytest.raises(ConfigSchemaError):
            load_config(str(path))


class TestPipeline:
    def test_artifact_layout(self, pipeline):
        expected = [
            "data/source_train/meta.json",
            "data/source_train/images.bin",
            "data/source_train/annotations.json",
            "data/target_eval/meta.json",
            "data/manifest.json",
            "checkpoints/source.ckpt",
            "checkpoints/source_finetuned.ckpt",
            "checkpoints/intermediate.ckpt",
            "checkpoints/target.ckpt",
            "checkpoints/adapt_log.jsonl",
            "checkpoints/manifest.json",
            "reports/eval.csv",
            "reports/eval.md",
            "reports/manifest.json",
        ]
        for rel in expected:
            assert os.path.isfile(os.path.join(pipeline, rel)), rel

    def test_manifest_schema(self, pipeline):
        with open(os.path.join(pipeline, "checkpoints", "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["command"] == "adapt"
        assert manifest["seed"] == 0
        assert len(manifest["config_sha256"]) == 64
        assert set(manifest["outputs"]) == {
            "source_finetuned.ckpt", "intermediate.ckpt", "target.ckpt", "adapt_log.jsonl",
        }
        for digest in manifest["outputs"].values():
            assert len(digest) == 64

    def test_adapt_log_lines_match_iterations(self, pipeline):
        log = os.path.join(pipeline, "checkpoints", "adapt_log.jsonl")
        lines = open(log).read().strip().splitlines()
        assert len(lines) == 3  # 1 epoch x 3 iters
        assert json.loads(lines[0])["iter"] == 0

    def test_rerun_is_bit_identical(self, tmp_path, tiny_config):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            for command in ("generate", "pretrain", "adapt", "eval"):
                assert run(command, "--config", tiny_config, "--out", out) == EXIT_OK
            outs.append(out)
        for sub in ("data", "checkpoints", "reports"):
            with open(os.path.join(outs[0], sub, "manifest.json")) as fh:
                ma = json.load(fh)
            with open(os.path.join(outs[1], sub, "manifest.json")) as fh:
                mb = json.load(fh)
            assert ma == mb

    def test_seed_override_changes_artifacts(self, tmp_path, tiny_config):
        out = str(tmp_path / "seeded")
        assert run("generate", "--config", tiny_config, "--out", out, "--seed", "7") == EXIT_OK
        with open(os.path.join(out, "data", "manifest.json")) as fh:
            assert json.load(fh)["seed"] == 7

    def test_eval_prints_summary(self, tmp_path, tiny_config, capsys):
        out = str(tmp_path / "run")
        for command in ("generate", "pretrain", "adapt"):
            assert run(command, "--config", tiny_config, "--out", out) == EXIT_OK
        assert run("eval", "--config", tiny_config, "--out", out) == EXIT_OK
        captured = capsys.readouterr().out
        assert "pck@0.05 overall" in captured


class TestExitCodes:
    def test_missing_dataset_for_pretrain(self, tmp_path, tiny_config):
        assert run("pretrain", "--config", tiny_config, "--out", str(tmp_path / "x")) == EXIT_MISSING_FILE

    def test_missing_checkpoint_for_adapt(self, tmp_path, tiny_config):
        out = str(tmp_path / "x")
        assert run("generate", "--config", tiny_config, "--out", out) == EXIT_OK
        assert run("adapt", "--config", tiny_config, "--out", out) == EXIT_MISSING_FILE

    def test_missing_config_file(self, tmp_path):
        assert run("generate", "--config", str(tmp_path / "none.json")) == EXIT_MISSING_FILE

    def test_schema_error_exit(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"bogus_section": {}}))
        assert run("generate", "--config", str(path)) == EXIT_SCHEMA

    def test_thread_env_validation(self, tmp_path, tiny_config, monkeypatch):
        monkeypatch.setenv("SFPA_THREADS", "abc")
        assert run("generate", "--config", tiny_config, "--out", str(tmp_path / "x")) == EXIT_SCHEMA
        monkeypatch.setenv("SFPA_THREADS", "0")
        assert run("generate", "--config", tiny_config, "--out", str(tmp_path / "y")) == EXIT_SCHEMA
        monkeypatch.setenv("SFPA_THREADS", "1")
        assert run("generate", "--config", tiny_config, "--out", str(tmp_path / "z")) == EXIT_OK

    def test_corrupt_checkpoint(self, tmp_path, tiny_config):
        out = str(tmp_path / "x")
        assert run("generate", "--config", tiny_config, "--out", out) == EXIT_OK
        ckpt_dir = os.path.join(out, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        with open(os.path.join(ckpt_dir, "source.ckpt"), "wb") as fh:
            fh.write(b"garbage bytes")
        assert run("adapt", "--config", tiny_config, "--out", out) == EXIT_CHECKPOINT

    def test_corrupt_dataset(self, tmp_path, tiny_config):
        out = str(tmp_path / "x")
        assert run("generate", "--config", tiny_config, "--out", out) == EXIT_OK
        bin_path = os.path.join(out, "data", "source_train", "images.bin")
        with open(bin_path, "rb") as fh:
            raw = fh.read()
        with open(bin_path, "wb") as fh:
            fh.write(raw[:-8])
        assert run("pretrain", "--config", tiny_config, "--out", out) == EXIT_DATASET


class TestHelp:
    def test_help_lists_every_config_key(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for key in ("seed", "paths.data_dir", "adapt.weights.alpha", "adapt.weights.gamma",
                    "schedule.lr_target_regressor", "target_style.line_width", "pck.threshold",
                    "ablation.gamma_grid", "arch.extractor_kernel", "pretrain.epochs"):
            assert key in text, key

    def test_target_style_defaults_render_shifted_values(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        text = capsys.readouterr().out
        line = [l for l in text.splitlines() if "target_style.line_width" in l][0]
        assert "2.0" in line

    def test_subcommand_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestAblateCommand:
    def test_tiny_ablation_run(self, tmp_path):
        config = {
            "generate": {"train_count": 8, "eval_count": 4},
            "pretrain": {"epochs": 1, "batch_size": 4},
            "ablation": {
                "seeds": [0],
                "studies": ["framework"],
                "train_count": 8,
                "eval_count": 4,
                "epochs": 1,
                "iters_per_epoch": 2,
            },
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config))
        out = str(tmp_path / "ab")
        assert run("ablate", "--config", str(path), "--out", out) == EXIT_OK
        for ext in ("csv", "md"):
            assert os.path.isfile(os.path.join(out, "reports", f"ablation_framework.{ext}"))
        with open(os.path.join(out, "reports", "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["command"] == "ablate"
