# core/patchgen.py
#
# Patch-Gen defect simulation. A normal cloud is (optionally) rotated, a
# viewpoint is drawn on the surface of the [-1, 1]^3 cube and the patch of
# points nearest to it is pushed along the viewpoint ray by a Gaussian
# translation field. Bulge / sink sort the field, damage uses it raw.
#
# Every output is index-aligned with its target so the per-point displacement
# can supervise the denoiser directly.

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Dict, Optional

import numpy as np

from core.config import DefectKind, PatchGenConfig
from core.errors import SelectionTooLarge
from core.geom import PointCloud, RotationMatrix, apply_rotation, knn, random_angles, rotation_from_angles

# Coordinates and displacements are snapped to multiples of this step so that
# anomalous + displacement == target holds exactly in float64.
LATTICE = 2.0 ** -32

KINDS = (DefectKind.BULGE, DefectKind.SINK, DefectKind.DAMAGE)


def snap(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values, dtype=np.float64) / LATTICE) * LATTICE


@dataclass(frozen=True, eq=False)
class AugmentedSample:
    anomalous: PointCloud
    target: PointCloud
    defect_mask: np.ndarray
    gt_displacement: np.ndarray
    meta: Dict[str, Any]

    def __post_init__(self):
        n = len(self.anomalous)
        if len(self.target) != n or self.defect_mask.shape != (n,) or self.gt_displacement.shape != (n, 3):
            raise ValueError("augmented sample arrays must share the anomalous cloud's length")


def patch_size(selection_ratio: float, n_points: int) -> int:
    """ceil(ratio * N), computed on the exact rational value of the ratio."""
    ratio = Fraction(selection_ratio).limit_denominator(1_000_000)
    return max(1, math.ceil(ratio * n_points))


def viewpoint_on_face(face: int, u: float, v: float) -> np.ndarray:
    """Point on cube face ``face`` (0:+x 1:-x 2:+y 3:-y 4:+z 5:-z) at offsets (u, v)."""
    if not 0 <= face < 6:
        raise ValueError(f"face must be in [0, 6), got {face}")
    axis, sign = divmod(face, 2)
    point = np.empty(3, dtype=np.float64)
    point[axis] = -1.0 if sign else 1.0
    others = [a for a in range(3) if a != axis]
    point[others[0]] = u
    point[others[1]] = v
    return point


def sample_viewpoint(seed: int) -> np.ndarray:
    """Uniform point on the surface of [-1, 1]^3: uniform face, then uniform on it."""
    rng = np.random.default_rng(seed)
    face = int(rng.integers(6))
    u, v = rng.uniform(-1.0, 1.0, size=2)
    return viewpoint_on_face(face, float(u), float(v))


def make_translation(kind: DefectKind, n: int, seed: int) -> np.ndarray:
    """Gaussian translation rows, shaped per defect kind.

    Row i is applied to the patch point of distance rank i from the viewpoint.
    Bulge rows are |T| sorted by decreasing norm (largest at the patch centre);
    sink rows are their negation; damage rows are the raw draws.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    kind = DefectKind(kind)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n, 3))
    if kind is DefectKind.DAMAGE:
        return raw
    magnitudes = np.abs(raw)
    order = np.argsort(-np.linalg.norm(magnitudes, axis=1), kind="stable")
    bulge = magnitudes[order]
    return bulge if kind is DefectKind.BULGE else -bulge


def deform_patch(
    points: np.ndarray,
    viewpoint: np.ndarray,
    translation: np.ndarray,
    scale_s: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Displace the ``len(translation)`` points nearest to ``viewpoint``.

    Returns (deformed points, patch indices in distance order, displacement).
    The ray is oriented from each patch point toward the viewpoint, so positive
    translation raises the surface and negative translation sinks it.
    """
    n = translation.shape[0]
    if n > points.shape[0]:
        raise SelectionTooLarge(f"patch of {n} points requested from a cloud of {points.shape[0]}")
    patch = knn(viewpoint[None, :], points, n)[0]
    ray = viewpoint[None, :] - points[patch]
    norms = np.linalg.norm(ray, axis=1, keepdims=True)
    direction = np.divide(ray, norms, out=np.zeros_like(ray), where=norms > 0)
    displacement = snap(scale_s * direction * translation)

    deformed = points.copy()
    deformed[patch] = points[patch] + displacement
    return deformed, patch, displacement


def _child_seeds(seed: int) -> tuple[int, int, int, int]:
    state = np.random.SeedSequence(seed).generate_state(4)
    return tuple(int(s) for s in state)  # rotation, viewpoint, translation, kind


def resolve_kind(cfg: PatchGenConfig, seed: Optional[int] = None) -> DefectKind:
    if cfg.kind is not None:
        return DefectKind(cfg.kind)
    kind_seed = _child_seeds(cfg.seed if seed is None else seed)[3]
    return KINDS[int(np.random.default_rng(kind_seed).integers(len(KINDS)))]


def patch_gen(pc: PointCloud, cfg: PatchGenConfig) -> AugmentedSample:
    """Build one (anomalous, target) training pair from a normalised cloud."""
    n = patch_size(cfg.selection_ratio, len(pc))
    if n > len(pc):
        raise SelectionTooLarge(f"patch of {n} points requested from a cloud of {len(pc)}")

    rot_seed, view_seed, trans_seed, _ = _child_seeds(cfg.seed)
    kind = resolve_kind(cfg)

    if cfg.rotate:
        angles = random_angles(rot_seed)
        rotation: RotationMatrix = rotation_from_angles(*angles)
        posed = apply_rotation(pc, rotation)
    else:
        angles = np.zeros(3)
        posed = pc

    base = snap(posed.points)
    viewpoint = sample_viewpoint(view_seed)
    translation = make_translation(kind, n, trans_seed)
    deformed, patch, _ = deform_patch(base, viewpoint, translation, cfg.scale_s)

    mask = np.zeros(len(pc), dtype=bool)
    mask[patch] = True
    labels = mask.astype(np.int8)

    # literal_target supervises against the un-rotated cloud.
    target_points = snap(pc.points) if cfg.literal_target else base
    target = PointCloud(target_points, np.zeros(len(pc), dtype=np.int8))
    anomalous = PointCloud(deformed, labels)

    meta = {
        "seed": int(cfg.seed),
        "kind": kind.value,
        "selection_ratio": float(cfg.selection_ratio),
        "scale_s": float(cfg.scale_s),
        "patch_size": int(n),
        "rotate": bool(cfg.rotate),
        "angles": [float(a) for a in angles],
        "viewpoint": [float(c) for c in viewpoint],
        "literal_target": bool(cfg.literal_target),
    }
    return AugmentedSample(
        anomalous=anomalous,
        target=target,
        defect_mask=mask,
        gt_displacement=target_points - deformed,
        meta=meta,
    )
