# core/shapes.py
#
# Seeded synthetic shapes standing in for scanned normal samples. Points are
# drawn uniformly by area on the analytic surface, optionally jittered, and
# normalised like any other input cloud.

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from core.config import ShapeKind, SynthConfig
from core.errors import InvalidSpec
from core.geom import PointCloud, normalize_cloud

MIN_POINTS = 64

DEFAULT_PARAMS: Dict[ShapeKind, Tuple[float, ...]] = {
    ShapeKind.SPHERE: (1.0,),  # radius
    ShapeKind.TORUS: (1.0, 0.3),  # major R, minor r
    ShapeKind.BOX: (1.0, 0.7, 0.5),  # half extents
    ShapeKind.ELLIPSOID: (1.0, 0.7, 0.5),  # semi-axes
}

_PARAM_COUNT = {kind: len(p) for kind, p in DEFAULT_PARAMS.items()}


@dataclass(frozen=True)
class SyntheticShapeSpec:
    kind: ShapeKind = ShapeKind.SPHERE
    num_points: int = 1024
    params: Tuple[float, ...] = field(default=())
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        try:
            kind = ShapeKind(self.kind)
        except ValueError as exc:
            raise InvalidSpec(f"unknown shape kind {self.kind!r}") from exc
        object.__setattr__(self, "kind", kind)

        params = tuple(float(p) for p in self.params) or DEFAULT_PARAMS[kind]
        object.__setattr__(self, "params", params)

        if self.num_points < MIN_POINTS:
            raise InvalidSpec(f"num_points must be >= {MIN_POINTS}, got {self.num_points}")
        if len(params) != _PARAM_COUNT[kind]:
            raise InvalidSpec(f"{kind.value} takes {_PARAM_COUNT[kind]} parameter(s), got {len(params)}")
        if any(not p > 0.0 for p in params):
            raise InvalidSpec(f"shape parameters must be positive, got {params}")
        if kind is ShapeKind.TORUS and params[1] >= params[0]:
            raise InvalidSpec("torus minor radius must be smaller than the major radius")
        if self.jitter < 0.0:
            raise InvalidSpec("jitter must be >= 0")

    @classmethod
    def from_config(cls, cfg: SynthConfig, seed: Optional[int] = None) -> "SyntheticShapeSpec":
        return cls(
            kind=cfg.shape,
            num_points=cfg.num_points,
            params=tuple(cfg.params),
            jitter=cfg.jitter,
            seed=cfg.seed if seed is None else seed,
        )


# ------------------------------------------------------------------ #
# Surface samplers (raw coordinates)
# ------------------------------------------------------------------ #
def _sphere(rng: np.random.Generator, n: int, params: Sequence[float]) -> np.ndarray:
    (radius,) = params
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus(rng: np.random.Generator, n: int, params: Sequence[float]) -> np.ndarray:
    big, small = params
    out = np.empty((0, 3))
    while out.shape[0] < n:
        m = 2 * (n - out.shape[0]) + 16
        u = rng.uniform(0.0, 2.0 * np.pi, m)
        v = rng.uniform(0.0, 2.0 * np.pi, m)
        # area element is proportional to (R + r cos v)
        keep = rng.uniform(0.0, big + small, m) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
        out = np.vstack([out, pts])
    return out[:n]


def _box(rng: np.random.Generator, n: int, params: Sequence[float]) -> np.ndarray:
    ext = np.asarray(params, dtype=np.float64)
    # face pairs normal to x, y, z
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * ext
    pts[np.arange(n), axis] = sign * ext[axis]
    return pts


def _ellipsoid(rng: np.random.Generator, n: int, params: Sequence[float]) -> np.ndarray:
    a, b, c = params
    g_max = max(b * c, a * c, a * b)
    out = np.empty((0, 3))
    while out.shape[0] < n:
        m = 2 * (n - out.shape[0]) + 16
        u = rng.standard_normal((m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = rng.uniform(0.0, g_max, m) < g
        out = np.vstack([out, u[keep] * np.array([a, b, c])])
    return out[:n]


_SAMPLERS = {
    ShapeKind.SPHERE: _sphere,
    ShapeKind.TORUS: _torus,
    ShapeKind.BOX: _box,
    ShapeKind.ELLIPSOID: _ellipsoid,
}


def sample_surface(spec: SyntheticShapeSpec) -> np.ndarray:
    """Area-uniform surface samples plus jitter, before normalisation."""
    rng = np.random.default_rng(spec.seed)
    pts = _SAMPLERS[spec.kind](rng, spec.num_points, spec.params)
    if spec.jitter > 0.0:
        pts = pts + rng.normal(0.0, spec.jitter, pts.shape)
    return pts


def gen_shape(spec: SyntheticShapeSpec) -> PointCloud:
    cloud, _ = normalize_cloud(PointCloud(sample_surface(spec)))
    return cloud
