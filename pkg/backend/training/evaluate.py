"""Detection metrics: AUROC, ROC sweeps, test-set evaluation and Patch-Gen quality."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import roc_curve

from core.config import PatchGenConfig
from core.errors import LengthMismatch, MissingPointLabels, SingleClass
from core.geom import PointCloud, chamfer_distance, downsample_random, normalize_cloud, psnr
from core.inference import AnomalyReport, object_score, point_scores, reconstruct
from core.log import get_logger
from core.model import Checkpoint
from core.patchgen import KINDS, patch_gen

logger = get_logger("evaluate")

Reconstructor = Callable[[PointCloud, int], PointCloud]


# ------------------------------------------------------------------ #
# AUROC
# ------------------------------------------------------------------ #
def _validate(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.shape[0]} scores for {y.shape[0]} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be binary (0/1)")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClass(f"AUROC needs both classes ({n_pos} positives of {y.size})")
    return s, y


def mann_whitney_u(scores: Sequence[float], labels: Sequence[int]) -> float:
    """U statistic of the positives from average (mid) ranks; ties count 0.5."""
    s, y = _validate(scores, labels)
    ranks = pd.Series(s).rank(method="average").to_numpy()
    n_pos = int(y.sum())
    return float(ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return mann_whitney_u(s, y) / (n_pos * n_neg)


@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float


def roc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    s, y = _validate(scores, labels)
    fpr, tpr, thresholds = roc_curve(y, s, drop_intermediate=False)
    return RocCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, auroc=auroc(s, y))


# ------------------------------------------------------------------ #
# Test-set evaluation
# ------------------------------------------------------------------ #
@dataclass
class EvaluationResult:
    i_auroc: float
    p_auroc: Optional[float]
    reports: List[AnomalyReport]
    object_labels: List[int]

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "metric": ["I-AUROC", "P-AUROC"],
                "value": [self.i_auroc, self.p_auroc],
            }
        )


def _warn_if_constant(values: np.ndarray, what: str) -> None:
    if values.size and float(values.max()) == float(values.min()):
        logger.warning("All %s are equal (%g); AUROC is degenerate (0.5)", what, float(values[0]))


def compute_metrics(
    object_scores: Sequence[float],
    object_labels: Sequence[int],
    clouds: Sequence[PointCloud],
    cloud_point_scores: Sequence[np.ndarray],
    require_point_labels: bool = True,
) -> Tuple[float, Optional[float]]:
    """(I-AUROC, P-AUROC) from per-object and per-point scores.

    Normal clouds without point labels count as all-normal; anomalous clouds
    must carry labels unless ``require_point_labels`` is False, in which case
    P-AUROC is None when any are missing.
    """
    obj = np.asarray(object_scores, dtype=np.float64)
    _warn_if_constant(obj, "object scores")
    i_auroc = auroc(obj, object_labels)

    pooled_scores, pooled_labels = [], []
    for cloud, scores, label in zip(clouds, cloud_point_scores, object_labels):
        if cloud.labels is not None:
            labels = cloud.labels
        elif int(label) == 0:
            labels = np.zeros(len(cloud), dtype=np.int8)
        elif require_point_labels:
            raise MissingPointLabels("anomalous test clouds need per-point labels for P-AUROC")
        else:
            return i_auroc, None
        pooled_scores.append(np.asarray(scores, dtype=np.float64))
        pooled_labels.append(labels)

    point_s = np.concatenate(pooled_scores)
    _warn_if_constant(point_s, "point scores")
    return i_auroc, auroc(point_s, np.concatenate(pooled_labels))


def evaluate(
    test_set: Sequence[Tuple[PointCloud, int]],
    ckpt: Optional[Checkpoint],
    k: int = 8,
    seed: int = 0,
    threads: Optional[int] = None,
    top_fraction: float = 0.01,
    reconstructor: Optional[Reconstructor] = None,
) -> EvaluationResult:
    """Score every test cloud and compute I-AUROC over objects, P-AUROC over pooled points."""
    if reconstructor is None:
        if ckpt is None:
            raise ValueError("evaluate needs a checkpoint or a reconstructor")

        def reconstructor(pc: PointCloud, s: int) -> PointCloud:
            return reconstruct(pc, ckpt, s)

    labels = [int(label) for _, label in test_set]
    if 0 not in labels or 1 not in labels:
        raise SingleClass("the test split needs at least one normal and one anomalous cloud")

    def _one(i: int, pc: PointCloud) -> AnomalyReport:
        recon = reconstructor(pc, seed + i)
        scores = point_scores(pc, recon, k)
        return AnomalyReport(pc, recon, scores, object_score(scores, top_fraction))

    reports = Parallel(n_jobs=threads or -1, prefer="threads")(
        delayed(_one)(i, pc) for i, (pc, _) in enumerate(test_set)
    )
    i_auroc, p_auroc = compute_metrics(
        [r.object_score for r in reports],
        labels,
        [r.input for r in reports],
        [r.point_scores for r in reports],
    )
    logger.info("I-AUROC %.4f | P-AUROC %.4f over %d clouds", i_auroc, p_auroc, len(reports))
    return EvaluationResult(i_auroc=i_auroc, p_auroc=p_auroc, reports=reports, object_labels=labels)


# ------------------------------------------------------------------ #
# Patch-Gen quality
# ------------------------------------------------------------------ #
def patchgen_quality(
    normals: Sequence[PointCloud],
    cfg: Optional[PatchGenConfig] = None,
    trials: int = 10,
    seed: int = 0,
) -> pd.DataFrame:
    """Mean PSNR / Chamfer between generated anomalies and their targets, per kind.

    The ``oracle`` row compares two different normal samples and gives the
    scale of natural shape variation.
    """
    if not normals:
        raise ValueError("need at least one normal cloud")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = cfg or PatchGenConfig()
    clouds = [normalize_cloud(pc)[0] for pc in normals]

    rows: List[Dict[str, object]] = []
    for kind in KINDS:
        psnrs, chamfers = [], []
        for t in range(trials):
            pc = clouds[t % len(clouds)]
            sample = patch_gen(pc, cfg.copy(update={"kind": kind, "seed": seed + t}))
            psnrs.append(psnr(sample.target, sample.anomalous))
            chamfers.append(chamfer_distance(sample.target, sample.anomalous))
        rows.append(_quality_row(kind.value, psnrs, chamfers))

    if len(clouds) >= 2:
        psnrs, chamfers = [], []
        for t in range(trials):
            a, b = clouds[t % len(clouds)], clouds[(t + 1) % len(clouds)]
            n = min(len(a), len(b))
            a, b = downsample_random(a, n, seed + t), downsample_random(b, n, seed + t)
            psnrs.append(psnr(a, b))
            chamfers.append(chamfer_distance(a, b))
        rows.append(_quality_row("oracle", psnrs, chamfers))
    else:
        logger.warning("Only one normal cloud given; skipping the oracle row")

    return pd.DataFrame(rows, columns=["kind", "trials", "psnr_mean", "chamfer_mean"])


def _quality_row(kind: str, psnrs: List[float], chamfers: List[float]) -> Dict[str, object]:
    return {
        "kind": kind,
        "trials": len(psnrs),
        "psnr_mean": float(np.mean(psnrs)),
        "chamfer_mean": float(np.mean(chamfers)),
    }
