"""
PointMend detection pipeline.

Reconstructs an anomaly-free version of a test cloud with the reverse
diffusion chain and scores every point by comparing its k-NN neighbourhood
in the input against the aligned neighbourhood in the reconstruction:

1. prepare_cloud   normalise + downsample to the checkpoint's point count
2. reconstruct     Δ^(T) ~ N(0, I) -> ... -> Δ^(0); P̂ = P + Δ^(0)
3. point_scores    point-cluster distance per index
4. object_score    mean of the top 1% point scores
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from joblib import Parallel, delayed
from matplotlib import colormaps

from core.config import DetectConfig
from core.diffusion import posterior_step
from core.errors import KTooLarge, LengthMismatch, PointCountMismatch
from core.geom import NormalizationTransform, PointCloud, downsample_indices, normalize_cloud, self_knn
from core.log import get_logger
from core.model import DTYPE, Checkpoint, load_checkpoint
from core.patchgen import patch_size

logger = get_logger("inference")

DEFAULT_COLORMAP = "jet"


@dataclass(frozen=True, eq=False)
class AnomalyReport:
    input: PointCloud
    reconstruction: PointCloud
    point_scores: np.ndarray
    object_score: float

    def __post_init__(self):
        if self.point_scores.shape != (len(self.input),):
            raise LengthMismatch(f"{self.point_scores.shape[0]} scores for {len(self.input)} points")
        if len(self.reconstruction) != len(self.input):
            raise LengthMismatch("reconstruction must be index-aligned with the input")


# ------------------------------------------------------------------ #
# Preprocessing
# ------------------------------------------------------------------ #
def prepare_cloud(
    pc: PointCloud,
    n: int,
    seed: int = 0,
) -> Tuple[PointCloud, NormalizationTransform, np.ndarray]:
    """Normalise, then downsample to ``n`` points; returns the kept input indices too."""
    normalized, transform = normalize_cloud(pc)
    kept = downsample_indices(len(normalized), n, seed)
    return normalized.subset(kept), transform, kept


# ------------------------------------------------------------------ #
# Reconstruction / scoring
# ------------------------------------------------------------------ #
def reconstruct(pc: PointCloud, ckpt: Checkpoint, seed: int = 0) -> PointCloud:
    """Run the full reverse chain conditioned on ``pc``; index-aligned output."""
    if len(pc) != ckpt.num_points:
        raise PointCountMismatch(
            f"cloud has {len(pc)} points but the checkpoint was trained on {ckpt.num_points}"
        )
    model, sched = ckpt.model, ckpt.schedule
    gen = torch.Generator().manual_seed(int(seed))
    points = torch.as_tensor(pc.points, dtype=DTYPE)
    anchor = points if model.config.point_anchor else None

    with torch.no_grad():
        c = model.encode(points)
        delta = torch.randn(points.shape, generator=gen, dtype=DTYPE)
        for t in range(sched.t_max, 0, -1):
            eps = model.denoise(delta, c, sched.beta(t), anchor)
            z = torch.randn(points.shape, generator=gen, dtype=DTYPE) if t > 1 else None
            delta = posterior_step(delta, eps, t, z, sched)

    return PointCloud(pc.points + delta.numpy(), pc.labels)


def point_scores(input: PointCloud, recon: PointCloud, k: int) -> np.ndarray:
    """Mean squared distance between matched members of the two k-NN clusters."""
    a = input.points if isinstance(input, PointCloud) else np.asarray(input, dtype=np.float64)
    b = recon.points if isinstance(recon, PointCloud) else np.asarray(recon, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"input has {a.shape[0]} points, reconstruction {b.shape[0]}")
    if k > a.shape[0]:
        raise KTooLarge(f"k={k} exceeds cloud size {a.shape[0]}")
    clusters_a = a[self_knn(a, k)]
    clusters_b = b[self_knn(b, k)]
    diff = clusters_a - clusters_b
    return (diff * diff).sum(axis=-1).mean(axis=-1)


def object_score(scores: Sequence[float], top_fraction: float = 0.01) -> float:
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("object_score needs at least one point score")
    n_top = patch_size(top_fraction, values.size)
    top = np.sort(values)[::-1][:n_top]
    return float(top.mean())


def anomaly_colors(scores: Sequence[float], cmap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """uint8 RGB per point from per-cloud min-max normalised scores."""
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    rgba = colormaps[cmap](norm)
    return np.round(rgba[:, :3] * 255.0).astype(np.uint8)


def detect(
    pc: PointCloud,
    ckpt: Checkpoint,
    k: int = 8,
    seed: int = 0,
    top_fraction: float = 0.01,
) -> AnomalyReport:
    recon = reconstruct(pc, ckpt, seed)
    scores = point_scores(pc, recon, k)
    return AnomalyReport(
        input=pc,
        reconstruction=recon,
        point_scores=scores,
        object_score=object_score(scores, top_fraction),
    )


def detect_many(
    clouds: Sequence[PointCloud],
    ckpt: Checkpoint,
    cfg: Optional[DetectConfig] = None,
) -> List[AnomalyReport]:
    """Reports in input order; cloud i is reconstructed with seed ``cfg.seed + i``."""
    cfg = cfg or DetectConfig()
    n_jobs = cfg.threads or -1
    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(detect)(pc, ckpt, cfg.k, cfg.seed + i, cfg.top_fraction) for i, pc in enumerate(clouds)
    )


# ------------------------------------------------------------------ #
# Service wrapper
# ------------------------------------------------------------------ #
class AnomalyDetector:
    """Loads a checkpoint once and scores raw clouds in their own coordinates."""

    def __init__(self, checkpoint_path: Optional[str] = None, checkpoint: Optional[Checkpoint] = None):
        if checkpoint is None:
            if checkpoint_path is None:
                raise ValueError("need a checkpoint or a checkpoint path")
            logger.info("Loading checkpoint from: %s", checkpoint_path)
            checkpoint = load_checkpoint(Path(checkpoint_path))
        self.checkpoint = checkpoint
        logger.info(
            "Detector ready (%d points, T=%d, trained %d iterations)",
            checkpoint.num_points, checkpoint.schedule.t_max, checkpoint.iteration,
        )

    @property
    def num_points(self) -> int:
        return self.checkpoint.num_points

    def predict(
        self,
        points: np.ndarray,
        k: int = 8,
        seed: int = 0,
        top_fraction: float = 0.01,
        labels: Optional[Sequence[int]] = None,
    ) -> Dict[str, Any]:
        """Scores for the kept points; ``labels`` are checked against ``points`` when given."""
        raw = PointCloud(points, labels)
        if len(raw) < self.num_points:
            raise PointCountMismatch(
                f"need at least {self.num_points} points, got {len(raw)}"
            )
        cloud, transform, kept = prepare_cloud(raw, self.num_points, seed)
        report = detect(cloud, self.checkpoint, k=k, seed=seed, top_fraction=top_fraction)
        return {
            "indices": kept.tolist(),
            "point_scores": report.point_scores.tolist(),
            "object_score": report.object_score,
            "reconstruction": transform.invert(report.reconstruction.points).tolist(),
        }
