# core/geom.py
#
# Point-cloud value types and the geometric primitives everything else is
# built on: normalisation, random downsampling, rotations, exact brute-force
# k-NN and the set-distance metrics used to judge reconstructions.

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from core.errors import DegenerateCloud, KTooLarge, LengthMismatch

Point3 = np.ndarray  # shape (3,), float64

# Query rows processed per distance block; bounds peak memory of knn/chamfer.
_QUERY_CHUNK = 512

# Distinguished PSNR value for identical clouds.
INFINITE_PSNR = math.inf
PSNR_PEAK = 2.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) float64 points with optional per-point binary labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DegenerateCloud("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int8, copy=True).reshape(-1)
            if labels.shape[0] != pts.shape[0]:
                raise LengthMismatch(
                    f"{labels.shape[0]} labels for {pts.shape[0]} points"
                )
            if np.any((labels != 0) & (labels != 1)):
                raise ValueError("labels must be binary (0/1)")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.labels)

    def subset(self, indices: Sequence[int]) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        labels = self.labels[idx] if self.labels is not None else None
        return PointCloud(self.points[idx], labels)


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class RotationMatrix:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-9:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ValueError("rotation matrix must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class NormalizationTransform:
    centroid: tuple
    scale: float

    def __post_init__(self):
        if not self.scale > 0.0:
            raise DegenerateCloud(f"normalization scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.centroid)) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.centroid)


# ------------------------------------------------------------------ #
# Normalisation / sampling
# ------------------------------------------------------------------ #
def normalize_cloud(pc: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Centre on the centroid and scale the largest |coordinate| to 1."""
    centroid = pc.points.mean(axis=0)
    centered = pc.points - centroid
    scale = float(np.max(np.abs(centered)))
    if not scale > 0.0:
        raise DegenerateCloud("all points coincide; cannot normalize")
    transform = NormalizationTransform(tuple(float(c) for c in centroid), scale)
    return pc.with_points(centered / scale), transform


def downsample_indices(n_total: int, n: int, seed: int) -> np.ndarray:
    """Indices picked by :func:`downsample_random` for a cloud of ``n_total`` points."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.permutation(n_total)[: min(n, n_total)]


def downsample_random(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """Sample ``min(n, |pc|)`` points without replacement (labels follow)."""
    return pc.subset(downsample_indices(len(pc), n, seed))


# ------------------------------------------------------------------ #
# Rotations
# ------------------------------------------------------------------ #
def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_angles(ax: float, ay: float, az: float) -> RotationMatrix:
    """Compose X, Y then Z axis rotations: R = Rx · Ry · Rz."""
    return RotationMatrix(_axis_rotation(0, ax) @ _axis_rotation(1, ay) @ _axis_rotation(2, az))


def random_angles(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 2.0 * math.pi, size=3)


def random_rotation(seed: int) -> RotationMatrix:
    ax, ay, az = random_angles(seed)
    return rotation_from_angles(ax, ay, az)


def apply_rotation(pc: PointCloud, r: RotationMatrix) -> PointCloud:
    """Right-multiply every (row) point by R."""
    return pc.with_points(pc.points @ r.matrix)


# ------------------------------------------------------------------ #
# Nearest neighbours
# ------------------------------------------------------------------ #
def squared_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """(M, N) squared Euclidean distances, summed in x, y, z order."""
    dx = query[:, None, 0] - reference[None, :, 0]
    dy = query[:, None, 1] - reference[None, :, 1]
    dz = query[:, None, 2] - reference[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def knn(query: CloudLike, reference: CloudLike, k: int) -> np.ndarray:
    """Indices of the k nearest reference points per query row.

    Rows are sorted by ascending distance; equal distances keep the lower
    reference index first (stable sort), so results match an exhaustive scan.
    """
    q = as_points(query)
    r = as_points(reference)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > r.shape[0]:
        raise KTooLarge(f"k={k} exceeds reference size {r.shape[0]}")

    out = np.empty((q.shape[0], k), dtype=np.int64)
    for start in range(0, q.shape[0], _QUERY_CHUNK):
        block = squared_distances(q[start : start + _QUERY_CHUNK], r)
        out[start : start + _QUERY_CHUNK] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return out


def self_knn(points: CloudLike, k: int) -> np.ndarray:
    """k-NN of a cloud within itself; slot 0 always holds the point's own index.

    The other slots keep ``knn`` order. With more than k coincident copies
    the point replaces the last twin in its row.
    """
    idx = knn(points, points, k)
    own = np.arange(idx.shape[0])
    missing = ~(idx == own[:, None]).any(axis=1)
    idx[missing, -1] = own[missing]
    order = np.argsort(idx != own[:, None], axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def _nearest_squared(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    best = np.empty(a.shape[0], dtype=np.float64)
    for start in range(0, a.shape[0], _QUERY_CHUNK):
        best[start : start + _QUERY_CHUNK] = squared_distances(a[start : start + _QUERY_CHUNK], b).min(axis=1)
    return best


# ------------------------------------------------------------------ #
# Set metrics
# ------------------------------------------------------------------ #
def chamfer_distance(a: CloudLike, b: CloudLike) -> float:
    """Symmetric sum of mean squared nearest-neighbour distances."""
    pa, pb = as_points(a), as_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    return float(_nearest_squared(pa, pb).mean() + _nearest_squared(pb, pa).mean())


def psnr(reference: CloudLike, candidate: CloudLike, peak: float = PSNR_PEAK) -> float:
    """Peak signal-to-noise ratio of index-aligned clouds, in dB."""
    ref, cand = as_points(reference), as_points(candidate)
    if ref.shape != cand.shape:
        raise LengthMismatch(f"psnr needs equal point counts, got {ref.shape[0]} and {cand.shape[0]}")
    mse = float(np.mean((ref - cand) ** 2))
    if mse == 0.0:
        return INFINITE_PSNR
    return 10.0 * math.log10(peak * peak / mse)
