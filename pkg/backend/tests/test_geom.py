"""Tests for core.geom: normalisation, sampling, rotations, k-NN, set metrics."""

import itertools
import math

import numpy as np
import pytest

from core.errors import DegenerateCloud, KTooLarge, LengthMismatch
from core.geom import (
    INFINITE_PSNR,
    PointCloud,
    apply_rotation,
    chamfer_distance,
    downsample_random,
    knn,
    normalize_cloud,
    psnr,
    random_angles,
    random_rotation,
    rotation_from_angles,
    self_knn,
)
from tests.helpers import exhaustive_knn


def _pairwise(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


# ------------------------------------------------------------------ #
# PointCloud
# ------------------------------------------------------------------ #
def test_point_cloud_is_read_only():
    pc = PointCloud(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0
    assert pc.has_labels


def test_point_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(LengthMismatch):
        PointCloud(np.zeros((3, 3)), [0, 1])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), [0, 2])
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0.0, 0.0]]))


# ------------------------------------------------------------------ #
# Normalisation
# ------------------------------------------------------------------ #
def test_normalize_cube_corners_unchanged():
    corners = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
    out, transform = normalize_cloud(PointCloud(corners))
    np.testing.assert_array_equal(out.points, corners)
    assert transform.centroid == (0.0, 0.0, 0.0)
    assert transform.scale == 1.0


def test_normalize_symmetric_pair():
    out, transform = normalize_cloud(PointCloud([[2.0, 0, 0], [4.0, 0, 0]]))
    np.testing.assert_array_equal(out.points, [[-1.0, 0, 0], [1.0, 0, 0]])
    assert transform.centroid == (3.0, 0.0, 0.0)
    assert transform.scale == 1.0


def test_normalize_matches_direct_formula_and_inverts():
    raw = np.random.default_rng(42).uniform(5.0, 7.0, (100, 3))
    out, transform = normalize_cloud(PointCloud(raw))

    centroid = raw.mean(axis=0)
    scale = np.abs(raw - centroid).max()
    np.testing.assert_allclose(transform.centroid, centroid, rtol=0, atol=1e-12)
    assert transform.scale == pytest.approx(scale, abs=1e-12)

    np.testing.assert_allclose(out.points.mean(axis=0), 0.0, atol=1e-9)
    assert np.abs(out.points).max() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(transform.invert(out.points), raw, rtol=0, atol=1e-12)


def test_normalize_keeps_labels():
    pc = PointCloud(np.random.default_rng(0).normal(size=(10, 3)), [1] + [0] * 9)
    out, _ = normalize_cloud(pc)
    np.testing.assert_array_equal(out.labels, pc.labels)


def test_normalize_degenerate():
    with pytest.raises(DegenerateCloud):
        normalize_cloud(PointCloud(np.ones((5, 3))))


# ------------------------------------------------------------------ #
# Downsampling
# ------------------------------------------------------------------ #
def test_downsample_without_reduction_is_a_permutation():
    pts = np.random.default_rng(1).normal(size=(10, 3))
    out = downsample_random(PointCloud(pts), 10, seed=0)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_downsample_is_deterministic():
    pc = PointCloud(np.random.default_rng(2).normal(size=(4096, 3)))
    a = downsample_random(pc, 2048, seed=7)
    b = downsample_random(pc, 2048, seed=7)
    assert len(a) == 2048
    np.testing.assert_array_equal(a.points, b.points)


def test_downsample_samples_without_replacement():
    pts = np.random.default_rng(3).normal(size=(100, 3))
    labels = np.arange(100) % 2
    out = downsample_random(PointCloud(pts, labels), 30, seed=3)
    rows = {tuple(p): i for i, p in enumerate(pts)}
    picked = [rows[tuple(p)] for p in out.points]
    assert len(set(picked)) == 30
    np.testing.assert_array_equal(out.labels, labels[picked])


def test_downsample_larger_than_cloud_returns_everything():
    pc = PointCloud(np.random.default_rng(4).normal(size=(5, 3)))
    assert len(downsample_random(pc, 50, seed=1)) == 5


# ------------------------------------------------------------------ #
# Rotations
# ------------------------------------------------------------------ #
def test_zero_angles_give_identity():
    np.testing.assert_array_equal(rotation_from_angles(0.0, 0.0, 0.0).matrix, np.eye(3))


def test_random_rotation_is_orthonormal():
    r = random_rotation(11).matrix
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_random_rotation_composes_axis_matrices():
    ax, ay, az = random_angles(11)
    assert all(0.0 <= a < 2 * math.pi for a in (ax, ay, az))
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    e_x = np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(e_x @ random_rotation(11).matrix, e_x @ (rx @ ry @ rz), atol=1e-12)


def test_rotation_half_turn_about_z():
    out = apply_rotation(PointCloud([[1.0, 2.0, 3.0]]), rotation_from_angles(0.0, 0.0, math.pi))
    np.testing.assert_allclose(out.points, [[-1.0, -2.0, 3.0]], atol=1e-12)


def test_rotation_identity_and_isometry():
    pc = PointCloud(np.random.default_rng(5).normal(size=(50, 3)), np.arange(50) % 2)
    same = apply_rotation(pc, rotation_from_angles(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(same.points, pc.points)

    rotated = apply_rotation(pc, random_rotation(5))
    np.testing.assert_allclose(_pairwise(rotated.points), _pairwise(pc.points), atol=1e-9)
    np.testing.assert_array_equal(rotated.labels, pc.labels)


# ------------------------------------------------------------------ #
# k-NN
# ------------------------------------------------------------------ #
def test_knn_self_is_nearest():
    pts = np.random.default_rng(6).normal(size=(40, 3))
    np.testing.assert_array_equal(knn(pts, pts, 1)[:, 0], np.arange(40))


def test_self_knn_puts_each_point_first_among_duplicates():
    base = np.random.default_rng(9).normal(size=(10, 3))
    # three copies of row 0 at indices 0, 10, 11; two of row 4 at 4, 12
    pts = np.vstack([base, base[[0, 0, 4]]])
    for k in (1, 2, 3, 5):
        idx = self_knn(pts, k)
        np.testing.assert_array_equal(idx[:, 0], np.arange(len(pts)))
        dist = np.linalg.norm(pts[idx] - pts[:, None, :], axis=-1)
        # still a nearest set: no listed neighbour is farther than the k-th in a plain scan
        kth = np.sort(_pairwise(pts), axis=1)[:, k - 1]
        assert (dist.max(axis=1) <= kth + 1e-12).all()
    assert self_knn(pts, 3)[11].tolist() == [11, 0, 10]


def test_knn_on_a_line():
    ref = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    assert knn(np.array([[0.9, 0, 0]]), ref, 2).tolist() == [[1, 0]]


def test_knn_matches_exhaustive_scan():
    rng = np.random.default_rng(7)
    ref = rng.normal(size=(500, 3))
    query = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(knn(query, ref, 8), exhaustive_knn(query, ref, 8))


def test_knn_random_instances_with_ties():
    rng = np.random.default_rng(8)
    for _ in range(20):
        m = int(rng.integers(20, 300))
        k = int(rng.integers(1, 17))
        # integer grid coordinates produce many equal distances
        ref = rng.integers(-3, 4, size=(m, 3)).astype(np.float64)
        query = rng.integers(-3, 4, size=(10, 3)).astype(np.float64)
        np.testing.assert_array_equal(knn(query, ref, k), exhaustive_knn(query, ref, k))


def test_knn_k_too_large():
    with pytest.raises(KTooLarge):
        knn(np.zeros((1, 3)), np.zeros((3, 3)), 4)


# ------------------------------------------------------------------ #
# Set metrics
# ------------------------------------------------------------------ #
def test_chamfer_simple_cases():
    a = np.random.default_rng(9).normal(size=(20, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0


def test_chamfer_matches_double_loop_and_is_symmetric():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))

    def directed(x, y):
        return sum(min(float(((p - q) ** 2).sum()) for q in y) for p in x) / len(x)

    expected = directed(a, b) + directed(b, a)
    assert chamfer_distance(a, b) == pytest.approx(expected, rel=1e-12)
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-15)


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(10).normal(size=(8, 3))
    assert psnr(a, a) == INFINITE_PSNR


def test_psnr_uniform_offset():
    a = np.zeros((16, 3))
    assert psnr(a, a + 0.2) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_recomputation():
    rng = np.random.default_rng(4)
    a = rng.uniform(-1, 1, (128, 3))
    b = a + rng.normal(scale=0.01, size=a.shape)
    mse = np.mean((a - b) ** 2)
    assert psnr(a, b) == pytest.approx(10 * math.log10(4.0 / mse), rel=1e-12)


def test_psnr_length_mismatch():
    with pytest.raises(LengthMismatch):
        psnr(np.zeros((3, 3)), np.zeros((4, 3)))
