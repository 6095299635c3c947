"""Command-line pipeline: generate, pretrain, adapt, eval, ablate.

Configuration is one JSON document validated strictly against the
``RunConfig`` schema (unknown keys are rejected). ``--seed`` and
``--out`` override the config. Every command writes a ``manifest.json``
into its output directory with the resolved-config hash, the seed and a
SHA-256 checksum per artifact, so identical configs and seeds yield
identical manifests.

Exit codes: 0 success, 1 internal error, 2 usage error, 3 missing input
file (dataset, checkpoint or config), 4 config schema violation,
5 checkpoint format or architecture mismatch, 6 dataset format error.

The environment variable ``SFPA_THREADS``, when set, bounds worker
pools; all built-in processing is sequential, which satisfies any bound
of at least one.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import typing
from dataclasses import dataclass, field

from .adapt import AdaptConfig, PretrainConfig, Schedule, adapt_loop, pretrain
from .evalkit import AblationConfig, PckConfig, evaluate, run_ablation
from .models import (
    ArchConfig,
    CheckpointError,
    ModelTriplet,
    build_posenet,
    load_checkpoint,
    save_checkpoint,
)
from .tensorgrad import ContractViolation
from .toydata import (
    SOURCE_STYLE,
    TARGET_STYLE,
    DatasetFormatError,
    DatasetSchemaError,
    DomainStyle,
    SkeletonSpec,
    generate,
    load_dataset,
    save_dataset,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_CHECKPOINT = 5
EXIT_DATASET = 6


class ConfigSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass(frozen=True)
class GenerateConfig:
    train_count: int = 400
    eval_count: int = 100


@dataclass(frozen=True)
class EvalCliConfig:
    """Empty strings mean the conventional paths under the run directories."""

    checkpoint: str = ""
    dataset: str = ""


@dataclass(frozen=True)
class AblationCliConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    studies: tuple = ("losses", "sparsity", "framework", "params")
    train_count: int = 400
    eval_count: int = 100
    epochs: int = 20
    iters_per_epoch: int = 50
    alpha_grid: tuple = (0.5, 0.7, 0.9)
    beta_grid: tuple = (0.3, 0.5, 0.7)
    gamma_grid: tuple = (0.65, 0.85, 1.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    skeleton: SkeletonSpec = field(default_factory=SkeletonSpec)
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE
    arch: ArchConfig = field(default_factory=ArchConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    schedule: Schedule = field(default_factory=Schedule)
    pck: PckConfig = field(default_factory=PckConfig)
    eval: EvalCliConfig = field(default_factory=EvalCliConfig)
    ablation: AblationCliConfig = field(default_factory=AblationCliConfig)


def _coerce(hint, value, path):
    if value is None:
        return None
    if dataclasses.is_dataclass(hint):
        return _build_config(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigSchemaError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigSchemaError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigSchemaError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigSchemaError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigSchemaError(f"{path}: expected an array, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build_config(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigSchemaError(f"{path}: expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigSchemaError(f"{path}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}")
    try:
        return dataclasses.replace(cls(), **kwargs) if kwargs else cls()
    except ContractViolation as e:
        raise ConfigSchemaError(f"{path}: {e}") from None


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigSchemaError(f"{path}: invalid JSON ({e})") from None
    return _build_config(RunConfig, data)


def _config_lines(obj, prefix=""):
    # walk a default-constructed instance, not the class: field defaults
    # such as the shifted target style would otherwise be lost
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            lines.extend(_config_lines(value, f"{prefix}{f.name}."))
        else:
            lines.append(f"  {prefix}{f.name} = {value!r}")
    return lines


def _config_help() -> str:
    return "config keys and defaults:\n" + "\n".join(_config_lines(RunConfig()))


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(cfg: RunConfig) -> str:
    # paths only say where artifacts land, not what their bytes are, so
    # they stay out of the hash; moving a run does not change its identity
    doc = dataclasses.asdict(cfg)
    doc.pop("paths", None)
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(command, cfg, out_dir, artifacts):
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_sha256": _config_hash(cfg),
        "outputs": {os.path.relpath(p, out_dir): _sha256_file(p) for p in sorted(artifacts)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _dataset_dir(cfg, name):
    return os.path.join(cfg.paths.data_dir, name)


def _load_dataset_checked(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    return load_dataset(path)


def cmd_generate(cfg: RunConfig) -> int:
    os.makedirs(cfg.paths.data_dir, exist_ok=True)
    plans = [
        ("source_train", cfg.source_style, cfg.generate.train_count, cfg.seed, "source"),
        ("source_eval", cfg.source_style, cfg.generate.eval_count, cfg.seed + 500, "source"),
        ("target_train", cfg.target_style, cfg.generate.train_count, cfg.seed + 1000, "target"),
        ("target_eval", cfg.target_style, cfg.generate.eval_count, cfg.seed + 2000, "target"),
    ]
    artifacts = []
    for name, style, count, seed, domain in plans:
        ds = generate(cfg.skeleton, style, count, seed, cfg.arch.image_size, domain=domain)
        out = _dataset_dir(cfg, name)
        save_dataset(ds, out)
        artifacts += [os.path.join(out, f) for f in ("meta.json", "images.bin", "annotations.json")]
        logger.info("generate: wrote %d samples to %s", count, out)
    _write_manifest("generate", cfg, cfg.paths.data_dir, artifacts)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    ds = _load_dataset_checked(_dataset_dir(cfg, "source_train"))
    net = build_posenet(cfg.arch, seed=cfg.seed)
    pretrain(net, ds, dataclasses.replace(cfg.pretrain, seed=cfg.seed), cfg.schedule)
    os.makedirs(cfg.paths.checkpoint_dir, exist_ok=True)
    path = os.path.join(cfg.paths.checkpoint_dir, "source.ckpt")
    save_checkpoint(net, path)
    logger.info("pretrain: wrote %s", path)
    _write_manifest("pretrain", cfg, cfg.paths.checkpoint_dir, [path])
    return EXIT_OK


def cmd_adapt(cfg: RunConfig) -> int:
    ds = _load_dataset_checked(_dataset_dir(cfg, "target_train"))
    src_path = os.path.join(cfg.paths.checkpoint_dir, "source.ckpt")
    if not os.path.isfile(src_path):
        raise FileNotFoundError(src_path)
    source = load_checkpoint(src_path, cfg.arch)
    triplet = ModelTriplet.from_source(source)
    adapt_cfg = dataclasses.replace(cfg.adapt, seed=cfg.seed)
    log_path = os.path.join(cfg.paths.checkpoint_dir, "adapt_log.jsonl")
    with open(log_path, "w") as log_stream:
        adapt_loop(triplet, ds, adapt_cfg, cfg.schedule, log_stream=log_stream)
    artifacts = [log_path]
    for name, net in (("source_finetuned", triplet.source), ("intermediate", triplet.intermediate),
                      ("target", triplet.target)):
        path = os.path.join(cfg.paths.checkpoint_dir, f"{name}.ckpt")
        save_checkpoint(net, path)
        artifacts.append(path)
    logger.info("adapt: wrote %d checkpoints to %s", 3, cfg.paths.checkpoint_dir)
    _write_manifest("adapt", cfg, cfg.paths.checkpoint_dir, artifacts)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = cfg.eval.checkpoint or os.path.join(cfg.paths.checkpoint_dir, "intermediate.ckpt")
    data_dir = cfg.eval.dataset or _dataset_dir(cfg, "target_eval")
    if not os.path.isfile(ckpt):
        raise FileNotFoundError(ckpt)
    net = load_checkpoint(ckpt, cfg.arch)
    ds = _load_dataset_checked(data_dir)
    report = evaluate(net, ds, cfg.pck, model_id=os.path.basename(ckpt))
    os.makedirs(cfg.paths.report_dir, exist_ok=True)
    csv_path = os.path.join(cfg.paths.report_dir, "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(report.csv_header()) + "\n")
        fh.write(",".join(report.csv_row()) + "\n")
    md_path = os.path.join(cfg.paths.report_dir, "eval.md")
    with open(md_path, "w") as fh:
        groups = list(report.group_pck.keys())
        fh.write("| Model | " + " | ".join(groups) + " | All |\n")
        fh.write("|" + "---|" * (len(groups) + 2) + "\n")
        cells = [report.model_id] + [f"{report.group_pck[g]:.1f}" for g in groups] + [f"{report.overall:.1f}"]
        fh.write("| " + " | ".join(cells) + " |\n")
    print(f"pck@{cfg.pck.threshold:g} overall {report.overall:.2f} on {report.sample_count} samples")
    _write_manifest("eval", cfg, cfg.paths.report_dir, [csv_path, md_path])
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    ab = cfg.ablation
    adapt_cfg = dataclasses.replace(cfg.adapt, epochs=ab.epochs, iters_per_epoch=ab.iters_per_epoch)
    ablation = AblationConfig(
        seeds=ab.seeds,
        studies=ab.studies,
        train_count=ab.train_count,
        eval_count=ab.eval_count,
        skeleton=cfg.skeleton,
        source_style=cfg.source_style,
        target_style=cfg.target_style,
        arch=cfg.arch,
        pretrain=cfg.pretrain,
        adapt=adapt_cfg,
        schedule=cfg.schedule,
        pck=cfg.pck,
        alpha_grid=ab.alpha_grid,
        beta_grid=ab.beta_grid,
        gamma_grid=ab.gamma_grid,
    )
    tables = run_ablation(ablation, out_dir=cfg.paths.report_dir)
    artifacts = []
    for name in tables:
        artifacts.append(os.path.join(cfg.paths.report_dir, f"ablation_{name}.csv"))
        artifacts.append(os.path.join(cfg.paths.report_dir, f"ablation_{name}.md"))
    _write_manifest("ablate", cfg, cfg.paths.report_dir, artifacts)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _apply_overrides(cfg: RunConfig, command: str, args) -> RunConfig:
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        # re-root every configured directory under the run directory so a
        # whole generate/pretrain/adapt/eval pipeline can share one --out
        paths = dataclasses.replace(
            cfg.paths,
            data_dir=os.path.join(args.out, cfg.paths.data_dir),
            checkpoint_dir=os.path.join(args.out, cfg.paths.checkpoint_dir),
            report_dir=os.path.join(args.out, cfg.paths.report_dir),
        )
        cfg = dataclasses.replace(cfg, paths=paths)
    return cfg


def _check_thread_env():
    raw = os.environ.get("SFPA_THREADS")
    if raw is None:
        return
    try:
        value = int(raw)
    except ValueError:
        raise ConfigSchemaError(f"SFPA_THREADS: expected an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigSchemaError(f"SFPA_THREADS: must be >= 1, got {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfpose",
        description="source-free domain-adaptive pose estimation, desk scale",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    help_lines = {
        "generate": "render the source and target toy datasets",
        "pretrain": "train the source model on labeled source data",
        "adapt": "run two-step source-free adaptation on target data",
        "eval": "PCK report for a checkpoint on a dataset",
        "ablate": "loss/variant/parameter ablation studies",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=help_lines[name])
        p.add_argument("--config", default=None, help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override this command's output directory")
    return parser


def _fail(category: str, message: str, code: int) -> int:
    sys.stderr.write(f"sfpose: error: category={category}: {message}\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check_thread_env()
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args.command, args)
        return COMMANDS[args.command](cfg)
    except FileNotFoundError as e:
        name = getattr(e, "filename", None) or str(e)
        return _fail("missing_file", f"required input not found: {name}", EXIT_MISSING_FILE)
    except ConfigSchemaError as e:
        return _fail("config_schema", str(e), EXIT_SCHEMA)
    except CheckpointError as e:
        return _fail("checkpoint", str(e), EXIT_CHECKPOINT)
    except (DatasetFormatError, DatasetSchemaError) as e:
        return _fail("dataset", str(e), EXIT_DATASET)
    except ContractViolation as e:
        return _fail("contract", str(e), EXIT_INTERNAL)


if __name__ == "__main__":
    raise SystemExit(main())
