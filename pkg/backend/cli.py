"""
PointMend command line.

    python -m cli synth    --config run.ini --out data
    python -m cli augment  --input clouds/ --out augmented --ratio 1/32
    python -m cli train    --manifest data/sphere --out runs/train
    python -m cli detect   --checkpoint runs/train/checkpoint.pt --manifest data/sphere
    python -m cli eval     --scores runs/detect/scores.csv --manifest data/sphere
    python -m cli quality  --manifest data/sphere

Exit codes: 0 ok, 1 unexpected failure, 2 config error, 3 I/O error,
4 training diverged, 5 checkpoint / point-count mismatch, 6 single-class split.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd

from core import log
from core.config import RunConfig, load_run_config, write_resolved
from core.dataio import (
    build_synthetic_dataset,
    load_manifest,
    load_ply,
    read_ply,
    save_ply,
    write_sidecar,
)
from core.errors import (
    CheckpointError,
    ConfigError,
    InvalidSchedule,
    InvalidSpec,
    InvalidWidths,
    IoError,
    ManifestError,
    ParseError,
    PointCountMismatch,
    PointMendError,
    SingleClass,
    TrainingDiverged,
    UnsupportedFormat,
)
from core.geom import PointCloud, normalize_cloud
from core.inference import anomaly_colors, detect_many, prepare_cloud
from core.model import load_checkpoint
from core.patchgen import patch_gen
from core.shapes import SyntheticShapeSpec, gen_shape
from training.evaluate import compute_metrics, patchgen_quality
from training.train_model import train

logger = log.get_logger("cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5
EXIT_SINGLE_CLASS = 6

DEFAULT_OUT = {
    "synth": "data",
    "augment": "augmented",
    "train": "runs/train",
    "detect": "runs/detect",
    "eval": "runs/eval",
    "quality": "runs/quality",
}

SCORES_NAME = "scores.csv"


# ------------------------------------------------------------------ #
# Argument parsing
# ------------------------------------------------------------------ #
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--k", type=int, help="point-cluster size for scoring")
    common.add_argument("--ratio", type=str, help="Patch-Gen selection ratio, e.g. 1/32")
    common.add_argument("--scale", type=float, help="Patch-Gen scaling factor S")
    common.add_argument("--kind", type=str, help="bulge | sink | damage | random")
    common.add_argument("--steps", type=int, help="diffusion steps T")
    common.add_argument("--iterations", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--manifest", type=Path, help="manifest file or class directory")
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--input", type=Path, help="PLY file or directory of PLY files")

    parser = argparse.ArgumentParser(prog="pointmend", description="Diffusion-based 3D anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="build a synthetic dataset")
    sub.add_parser("augment", parents=[common], help="apply Patch-Gen to PLY files")
    p_train = sub.add_parser("train", parents=[common], help="train the reconstruction model")
    p_train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    sub.add_parser("detect", parents=[common], help="score test clouds with a checkpoint")
    p_eval = sub.add_parser("eval", parents=[common], help="I-AUROC / P-AUROC from a score table")
    p_eval.add_argument("--scores", type=Path, help="score table written by detect")
    p_quality = sub.add_parser("quality", parents=[common], help="Patch-Gen PSNR / Chamfer report")
    p_quality.add_argument("--trials", type=int, default=10)
    return parser


def flag_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    seed = args.seed
    return {
        "patchgen": {
            "selection_ratio": args.ratio,
            "scale_s": args.scale,
            "kind": args.kind,
            "seed": seed,
        },
        "schedule": {"t_max": args.steps},
        "train": {"iterations": args.iterations, "batch_size": args.batch, "seed": seed},
        "detect": {"k": args.k, "threads": args.threads, "seed": seed},
        "synth": {"seed": seed},
        "paths": {
            "manifest": args.manifest,
            "checkpoint": args.checkpoint,
            "input": args.input,
            "out": args.out,
            "scores": getattr(args, "scores", None),
        },
    }


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = cfg.paths.out or Path(DEFAULT_OUT[command])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _input_files(path: Optional[Path]) -> List[Path]:
    if path is None:
        raise ConfigError("--input is required")
    if path.is_dir():
        files = sorted(path.glob("*.ply"))
        if not files:
            raise IoError(f"No .ply files in {path}")
        return files
    if not path.exists():
        raise IoError(f"Input not found: {path}")
    return [path]


# ------------------------------------------------------------------ #
# Commands
# ------------------------------------------------------------------ #
def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    root = _out_dir(cfg, "synth")
    synth = cfg.synth
    spec = SyntheticShapeSpec.from_config(synth)
    manifest = build_synthetic_dataset(
        spec,
        root,
        synth.class_name,
        n_train=synth.n_train,
        n_test_normal=synth.n_test_normal,
        n_test_anomalous=synth.n_test_anomalous,
        patchgen=cfg.patchgen,
        seed=synth.seed,
    )
    write_resolved(cfg, manifest.root)
    print(manifest.path)
    return EXIT_OK


def cmd_augment(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _out_dir(cfg, "augment")
    for i, path in enumerate(_input_files(cfg.paths.input)):
        pc, _ = normalize_cloud(load_ply(path))
        sample = patch_gen(pc, cfg.patchgen.copy(update={"seed": cfg.patchgen.seed + i}))
        target = save_ply(sample.anomalous, out / f"{path.stem}_anomalous.ply")
        meta = dict(sample.meta, source=path.name, defect_points=int(sample.defect_mask.sum()))
        write_sidecar(target, meta)
        logger.info("%s -> %s (%d defect points, %s)", path.name, target.name, meta["defect_points"], meta["kind"])
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.paths.manifest is None:
        raise ConfigError("train needs --manifest (or [paths] manifest)")
    out = _out_dir(cfg, "train")
    manifest = load_manifest(cfg.paths.manifest)
    pool = [load_ply(p) for p in manifest.train]
    resume = load_checkpoint(args.resume) if args.resume else None
    write_resolved(cfg, out)
    train(pool, cfg.train_config(), out_dir=out, resume=resume)
    return EXIT_OK


def cmd_detect(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.paths.checkpoint is None:
        raise CheckpointError("detect needs --checkpoint")
    ckpt = load_checkpoint(cfg.paths.checkpoint)
    out = _out_dir(cfg, "detect")

    # (sample id, cloud, object label or None)
    samples = []
    if cfg.paths.manifest is not None:
        manifest = load_manifest(cfg.paths.manifest)
        for entry in manifest.test:
            cloud = load_ply(entry.path)
            if not entry.has_point_labels and cloud.has_labels:
                cloud = PointCloud(cloud.points)
            samples.append((entry.path.relative_to(manifest.root).as_posix(), cloud, entry.object_label))
    else:
        for path in _input_files(cfg.paths.input):
            samples.append((path.name, load_ply(path), None))

    prepared = []
    for i, (_, cloud, _) in enumerate(samples):
        if len(cloud) < ckpt.num_points:
            raise PointCountMismatch(
                f"{samples[i][0]} has {len(cloud)} points; checkpoint expects {ckpt.num_points}"
            )
        prepared.append(prepare_cloud(cloud, ckpt.num_points, cfg.detect.seed + i)[0])

    reports = detect_many(prepared, ckpt, cfg.detect)
    rows = []
    for (sample_id, _, label), report in zip(samples, reports):
        report_path = Path("reports") / (Path(sample_id).with_suffix("").as_posix().replace("/", "__") + ".ply")
        save_ply(
            report.input,
            out / report_path,
            scores=report.point_scores,
            colors=anomaly_colors(report.point_scores),
        )
        rows.append(
            {
                "sample": sample_id,
                "object_score": report.object_score,
                "object_label": label,
                "report": report_path.as_posix(),
            }
        )
        logger.info("%s: object score %.6g", sample_id, report.object_score)

    table = pd.DataFrame(rows, columns=["sample", "object_score", "object_label", "report"])
    table.to_csv(out / SCORES_NAME, index=False, lineterminator="\n")
    write_resolved(cfg, out)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.paths.scores is None or cfg.paths.manifest is None:
        raise ConfigError("eval needs --scores and --manifest")
    scores_path = Path(cfg.paths.scores)
    if not scores_path.exists():
        raise IoError(f"Score table not found: {scores_path}")
    table = pd.read_csv(scores_path, dtype={"sample": str, "report": str})
    manifest = load_manifest(cfg.paths.manifest)
    by_sample = {row.sample: row for row in table.itertuples(index=False)}

    object_scores, labels, clouds, point_scores = [], [], [], []
    for entry in manifest.test:
        sample_id = entry.path.relative_to(manifest.root).as_posix()
        row = by_sample.get(sample_id)
        if row is None:
            raise ParseError(f"score table has no row for {sample_id}", path=str(scores_path))
        ply = read_ply(scores_path.parent / row.report)
        if ply.scores is None:
            raise ParseError("report PLY lacks an anomaly_score channel", path=str(row.report))
        cloud = ply.cloud if entry.has_point_labels else PointCloud(ply.cloud.points)
        object_scores.append(float(row.object_score))
        labels.append(entry.object_label)
        clouds.append(cloud)
        point_scores.append(ply.scores)

    i_auroc, p_auroc = compute_metrics(object_scores, labels, clouds, point_scores, require_point_labels=False)
    if p_auroc is None:
        logger.warning("Some anomalous samples lack point labels; P-AUROC not computed")

    result = pd.DataFrame({"metric": ["I-AUROC", "P-AUROC"], "value": [i_auroc, p_auroc]})
    print(result.to_string(index=False))
    out = _out_dir(cfg, "eval")
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump({"i_auroc": i_auroc, "p_auroc": p_auroc, "samples": len(labels)}, fh, indent=2)
        fh.write("\n")
    write_resolved(cfg, out)
    return EXIT_OK


def cmd_quality(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.paths.manifest is not None:
        normals = [load_ply(p) for p in load_manifest(cfg.paths.manifest).train]
    else:
        base = SyntheticShapeSpec.from_config(cfg.synth)
        normals = [
            gen_shape(SyntheticShapeSpec(base.kind, base.num_points, base.params, base.jitter, base.seed + i))
            for i in range(cfg.synth.n_train)
        ]
    report = patchgen_quality(normals, cfg.patchgen, trials=args.trials, seed=cfg.patchgen.seed)
    out = _out_dir(cfg, "quality")
    report.to_csv(out / "quality.csv", index=False, lineterminator="\n")
    write_resolved(cfg, out)
    print(report.to_string(index=False))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "quality": cmd_quality,
}


# ------------------------------------------------------------------ #
# Entry point
# ------------------------------------------------------------------ #
def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InvalidSpec, InvalidSchedule, InvalidWidths)):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, (CheckpointError, PointCountMismatch)):
        return EXIT_CHECKPOINT
    if isinstance(exc, SingleClass):
        return EXIT_SINGLE_CLASS
    if isinstance(exc, (IoError, ManifestError, ParseError, UnsupportedFormat, OSError)):
        return EXIT_IO
    return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log.configure()
    try:
        cfg = load_run_config(args.config, flag_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (PointMendError, OSError) as exc:
        code = exit_code_for(exc)
        logger.error("%s failed: %s", args.command, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
