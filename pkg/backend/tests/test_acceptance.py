"""Desk-scale acceptance runs. Slow; run with ``pytest -m slow``."""

import time

import numpy as np
import pandas as pd
import pytest
import torch

from core.config import ModelConfig, PatchGenConfig, ScheduleConfig, TrainConfig
from core.dataio import build_synthetic_dataset, load_split
from core.diffusion import linear_schedule
from core.geom import PointCloud, knn
from core.model import TrainingTuple, forward_batch, init_params, loss_and_gradients
from core.patchgen import patch_gen, patch_size
from core.shapes import SyntheticShapeSpec
from training.evaluate import evaluate
from training.train_model import METRICS_NAME, train
from tests.helpers import exhaustive_knn, unit_sphere

pytestmark = pytest.mark.slow

DESK_RUN = TrainConfig(
    batch_size=16,
    iterations=2000,
    num_points=1024,
    log_every=50,
    schedule=ScheduleConfig(t_max=200),
)


@pytest.fixture(scope="module")
def sphere_class(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = SyntheticShapeSpec("sphere", 1024, seed=0)
    manifest = build_synthetic_dataset(spec, root, "sphere", 4, 25, 25, PatchGenConfig(), seed=0)
    return load_split(manifest)


def _desk_run(split, out_dir):
    train_pool, test_set = split
    start = time.perf_counter()
    ckpt = train(train_pool, DESK_RUN, out_dir=out_dir)
    result = evaluate(test_set, ckpt, k=8, seed=0)
    return ckpt, result, time.perf_counter() - start


def test_desk_scale_detection(sphere_class, tmp_path, record_property):
    ckpt, result, elapsed = _desk_run(sphere_class, tmp_path / "a")
    # wall time is recorded, not asserted: the 15 minute budget assumes a 4-core desktop
    record_property("desk_run_seconds", round(elapsed, 1))
    assert result.i_auroc >= 0.80
    assert result.p_auroc >= 0.70

    metrics = pd.read_csv(tmp_path / "a" / METRICS_NAME).set_index("iteration")
    assert len(metrics) == DESK_RUN.iterations
    # t is redrawn every iteration, so the final loss is averaged over the last log window
    final_noise = metrics.loc[DESK_RUN.iterations - DESK_RUN.log_every + 1 :, "noise_loss"].mean()
    assert final_noise < 0.2 * metrics.loc[1, "noise_loss"]
    assert metrics.loc[2000, "recon_mse"] < 0.2 * metrics.loc[50, "recon_mse"]

    again, result2, _ = _desk_run(sphere_class, tmp_path / "b")
    a, b = ckpt.model.state_dict(), again.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert (result.i_auroc, result.p_auroc) == (result2.i_auroc, result2.p_auroc)


def test_gradients_with_default_widths():
    cfg = ModelConfig()
    sched = linear_schedule(200, 1e-4, 0.05)
    model = init_params(0, cfg)
    rng = np.random.default_rng(0)
    batch = [
        TrainingTuple(
            anomalous=unit_sphere(64, 1),
            displacement=rng.normal(scale=0.05, size=(64, 3)),
            t=int(rng.integers(1, 201)),
            eps=rng.normal(size=(64, 3)),
        )
    ]
    _, grads = loss_and_gradients(batch, model, sched, 0)
    params = dict(model.named_parameters())
    names = sorted(params)
    h = 1e-5
    for _ in range(100):
        name = names[int(rng.integers(len(names)))]
        flat = params[name].data.view(-1)
        i = int(rng.integers(flat.numel()))
        original = float(flat[i])
        flat[i] = original + h
        with torch.no_grad():
            up = float(forward_batch(batch, model, sched, 0).loss)
        flat[i] = original - h
        with torch.no_grad():
            down = float(forward_batch(batch, model, sched, 0).loss)
        flat[i] = original
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].view(-1)[i])
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, name


def test_knn_matches_exhaustive_scan_at_scale():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_ref = int(rng.integers(16, 2001))
        k = int(rng.integers(1, 17))
        # integer grid forces distance ties
        reference = rng.integers(-5, 6, (n_ref, 3)).astype(float)
        query = rng.integers(-5, 6, (4, 3)).astype(float)
        np.testing.assert_array_equal(knn(query, reference, k), exhaustive_knn(query, reference, k))


def test_patch_gen_invariants_over_many_seeds():
    cloud = PointCloud(unit_sphere(512, 0))
    n_defect = patch_size(1 / 32, 512)
    for seed in range(500):
        cfg = PatchGenConfig(seed=seed, rotate=False)
        sample = patch_gen(cloud, cfg)
        moved = np.any(sample.anomalous.points != sample.target.points, axis=1)
        assert len(sample.anomalous) == 512
        assert int(sample.defect_mask.sum()) == n_defect
        assert not moved[~sample.defect_mask].any()
        np.testing.assert_array_equal(sample.anomalous.points + sample.gt_displacement, sample.target.points)

        bulge = patch_gen(cloud, cfg.copy(update={"kind": "bulge"}))
        sink = patch_gen(cloud, cfg.copy(update={"kind": "sink"}))
        np.testing.assert_array_equal(bulge.gt_displacement, -sink.gt_displacement)
        np.testing.assert_array_equal(patch_gen(cloud, cfg).anomalous.points, sample.anomalous.points)
