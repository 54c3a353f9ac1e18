"""Tests for training.evaluate: AUROC, ROC sweeps, test-set evaluation, Patch-Gen quality."""

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from core.config import PatchGenConfig
from core.errors import LengthMismatch, MissingPointLabels, SingleClass
from core.geom import PointCloud, normalize_cloud
from core.patchgen import patch_gen
from training.evaluate import auroc, compute_metrics, evaluate, mann_whitney_u, patchgen_quality, roc
from tests.helpers import pairwise_auroc, unit_sphere


# ------------------------------------------------------------------ #
# AUROC
# ------------------------------------------------------------------ #
def test_perfect_separation():
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.9, 0.8, 0.3, 0.2], [0, 0, 1, 1]) == 0.0


def test_all_ties_give_one_half():
    assert auroc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for i in range(50):
        n = int(rng.integers(2, 401))
        # every other instance draws from a handful of values to force ties
        scores = rng.integers(0, 5, n).astype(float) if i % 2 else rng.normal(size=n)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) == pairwise_auroc(scores, labels)


def test_large_instance_matches_oracle_and_sklearn():
    rng = np.random.default_rng(1)
    scores, labels = rng.normal(size=1000), rng.integers(0, 2, 1000)
    assert auroc(scores, labels) == pairwise_auroc(scores, labels)
    assert auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_label_flip_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 300))
        scores = rng.integers(0, 10, n).astype(float)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        flipped = 1 - labels
        n_pos = int(labels.sum())
        assert mann_whitney_u(scores, labels) + mann_whitney_u(scores, flipped) == n_pos * (n - n_pos)
        assert auroc(scores, labels) + auroc(scores, flipped) == 1.0


def test_rank_invariance():
    rng = np.random.default_rng(3)
    scores = rng.permutation(200).astype(float)
    labels = rng.integers(0, 2, 200)
    labels[:2] = [0, 1]
    assert auroc(np.exp(scores / 50.0), labels) == auroc(scores, labels)


def test_auroc_errors():
    with pytest.raises(SingleClass):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(LengthMismatch):
        auroc([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 2])


def test_roc_curve_is_monotone():
    rng = np.random.default_rng(4)
    curve = roc(rng.normal(size=100), rng.integers(0, 2, 100))
    assert np.all(np.diff(curve.tpr) >= 0) and np.all(np.diff(curve.fpr) >= 0)
    assert 0.0 <= curve.auroc <= 1.0


# ------------------------------------------------------------------ #
# Metrics over clouds
# ------------------------------------------------------------------ #
def _labelled(n: int, positives: int, seed: int) -> PointCloud:
    labels = np.zeros(n, dtype=np.int8)
    labels[:positives] = 1
    return PointCloud(unit_sphere(n, seed), labels)


def test_compute_metrics_perfect_scores():
    clouds = [_labelled(32, 0, 0), _labelled(32, 2, 1)]
    scores = [np.zeros(32), np.r_[np.ones(2), np.zeros(30)]]
    assert compute_metrics([0.0, 1.0], [0, 1], clouds, scores) == (1.0, 1.0)


def test_compute_metrics_constant_scores_warn(caplog):
    clouds = [_labelled(32, 0, 0), _labelled(32, 2, 1)]
    with caplog.at_level("WARNING"):
        i_auroc, p_auroc = compute_metrics([0.0, 0.0], [0, 1], clouds, [np.zeros(32), np.zeros(32)])
    assert (i_auroc, p_auroc) == (0.5, 0.5)
    assert "degenerate" in caplog.text


def test_compute_metrics_missing_point_labels():
    clouds = [PointCloud(unit_sphere(16, 0)), PointCloud(unit_sphere(16, 1))]
    scores = [np.zeros(16), np.ones(16)]
    with pytest.raises(MissingPointLabels):
        compute_metrics([0.0, 1.0], [0, 1], clouds, scores)
    assert compute_metrics([0.0, 1.0], [0, 1], clouds, scores, require_point_labels=False) == (1.0, None)


def _synthetic_test_set(n_normal: int = 4, n_anomalous: int = 4):
    test_set, targets = [], {}
    for i in range(n_normal):
        pc, _ = normalize_cloud(PointCloud(unit_sphere(256, 100 + i)))
        test_set.append((PointCloud(pc.points, np.zeros(256, dtype=np.int8)), 0))
    for i in range(n_anomalous):
        pc, _ = normalize_cloud(PointCloud(unit_sphere(256, 200 + i)))
        sample = patch_gen(pc, PatchGenConfig(seed=i, rotate=False))
        targets[id(sample.anomalous)] = sample.target
        test_set.append((sample.anomalous, 1))
    return test_set, targets


def test_oracle_reconstruction_is_perfect():
    test_set, targets = _synthetic_test_set()

    def oracle(pc, seed):
        return targets.get(id(pc), pc)

    result = evaluate(test_set, None, k=1, threads=2, reconstructor=oracle)
    assert result.i_auroc == 1.0
    assert result.p_auroc == 1.0
    assert len(result.reports) == len(test_set)
    assert list(result.table()["metric"]) == ["I-AUROC", "P-AUROC"]


def test_input_as_reconstruction_is_degenerate(caplog):
    test_set, _ = _synthetic_test_set(2, 2)
    with caplog.at_level("WARNING"):
        result = evaluate(test_set, None, k=4, reconstructor=lambda pc, seed: pc)
    assert result.i_auroc == 0.5 and result.p_auroc == 0.5
    assert "degenerate" in caplog.text


def test_evaluate_needs_both_classes():
    test_set, _ = _synthetic_test_set(2, 0)
    with pytest.raises(SingleClass):
        evaluate(test_set, None, reconstructor=lambda pc, seed: pc)


# ------------------------------------------------------------------ #
# Patch-Gen quality
# ------------------------------------------------------------------ #
def test_patchgen_quality_report():
    normals = [PointCloud(unit_sphere(256, s)) for s in range(3)]
    report = patchgen_quality(normals, PatchGenConfig(), trials=3, seed=1)
    assert list(report.columns) == ["kind", "trials", "psnr_mean", "chamfer_mean"]
    assert list(report["kind"]) == ["bulge", "sink", "damage", "oracle"]
    assert (report["trials"] == 3).all()
    assert np.isfinite(report["psnr_mean"]).all()
    assert (report["chamfer_mean"] >= 0).all()


def test_patchgen_quality_without_oracle_row():
    report = patchgen_quality([PointCloud(unit_sphere(128, 0))], trials=1)
    assert "oracle" not in set(report["kind"])
