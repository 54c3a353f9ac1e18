"""End-to-end tests for the command line."""

import json

import numpy as np
import pandas as pd
import pytest

import cli
from core.config import PatchGenConfig
from core.dataio import load_manifest, load_ply, read_ply, save_ply
from core.geom import PointCloud, normalize_cloud
from core.patchgen import patch_gen
from tests.helpers import unit_sphere

SMALL_RUN = """
[synth]
class_name = ball
num_points = 64
n_train = 2
n_test_normal = 3
n_test_anomalous = 3

[train]
iterations = 1
batch_size = 2
num_points = 64
log_every = 1

[schedule]
t_max = 10

[model]
encoder_widths = 16, 32
denoiser_widths = 16, 16

[detect]
k = 4
threads = 1
"""


@pytest.fixture
def run_ini(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL_RUN, encoding="utf-8")
    return path


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


# ------------------------------------------------------------------ #
# synth / augment
# ------------------------------------------------------------------ #
def test_synth_builds_a_dataset(tmp_path, run_ini, capsys):
    assert _run("synth", "--config", run_ini, "--out", tmp_path / "data") == 0
    manifest = load_manifest(tmp_path / "data" / "ball")
    assert len(manifest.train) == 2 and len(manifest.test) == 6
    assert (manifest.root / "resolved_config.json").exists()
    assert "manifest.csv" in capsys.readouterr().out


def test_bad_config_key_exits_2(tmp_path, caplog):
    path = tmp_path / "bad.ini"
    path.write_text("[synth]\nnum_pionts = 64\n", encoding="utf-8")
    assert _run("synth", "--config", path, "--out", tmp_path / "data") == cli.EXIT_CONFIG
    assert "num_pionts" in caplog.text


def test_augment_matches_the_library(tmp_path):
    src = tmp_path / "clouds"
    for seed in range(2):
        save_ply(unit_sphere(2048, seed), src / f"part_{seed}.ply")
    out = tmp_path / "aug"
    assert _run("augment", "--input", src, "--out", out, "--ratio", "1/32", "--seed", 5) == 0

    outputs = sorted(out.glob("*_anomalous.ply"))
    assert [p.name for p in outputs] == ["part_0_anomalous.ply", "part_1_anomalous.ply"]
    for i, path in enumerate(outputs):
        cloud = load_ply(path)
        assert int(cloud.labels.sum()) == 64
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        assert meta["defect_points"] == 64 and meta["source"] == f"part_{i}.ply"

        pc, _ = normalize_cloud(load_ply(src / f"part_{i}.ply"))
        expected = patch_gen(pc, PatchGenConfig(selection_ratio="1/32", seed=5 + i))
        np.testing.assert_array_equal(cloud.points, expected.anomalous.points)


def test_augment_without_input_is_a_config_error(tmp_path):
    assert _run("augment", "--out", tmp_path / "aug") == cli.EXIT_CONFIG


def test_augment_missing_input_is_an_io_error(tmp_path):
    assert _run("augment", "--input", tmp_path / "nothing.ply", "--out", tmp_path / "aug") == cli.EXIT_IO


# ------------------------------------------------------------------ #
# train / detect / eval
# ------------------------------------------------------------------ #
def test_train_detect_eval_pipeline(tmp_path, run_ini):
    data, runs = tmp_path / "data", tmp_path / "runs"
    assert _run("synth", "--config", run_ini, "--out", data) == 0
    class_dir = data / "ball"

    assert _run("train", "--config", run_ini, "--manifest", class_dir, "--out", runs / "train") == 0
    checkpoint = runs / "train" / "checkpoint.pt"
    assert checkpoint.exists()
    assert len(pd.read_csv(runs / "train" / "metrics.csv")) == 1

    detect_args = ("detect", "--config", run_ini, "--manifest", class_dir, "--checkpoint", checkpoint)
    assert _run(*detect_args, "--out", runs / "detect") == 0
    table = pd.read_csv(runs / "detect" / "scores.csv")
    assert list(table.columns) == ["sample", "object_score", "object_label", "report"]
    assert len(table) == 6 and (table["object_score"] >= 0).all()
    report = read_ply(runs / "detect" / table["report"][0])
    assert report.scores is not None and report.colors is not None

    # same seed, same scores
    assert _run(*detect_args, "--out", runs / "detect2") == 0
    again = pd.read_csv(runs / "detect2" / "scores.csv")
    np.testing.assert_array_equal(table["object_score"], again["object_score"])

    scores = runs / "detect" / "scores.csv"
    assert _run("eval", "--scores", scores, "--manifest", class_dir, "--out", runs / "eval") == 0
    result = json.loads((runs / "eval" / "eval.json").read_text(encoding="utf-8"))
    assert 0.0 <= result["i_auroc"] <= 1.0
    assert 0.0 <= result["p_auroc"] <= 1.0
    assert result["samples"] == 6


def test_train_without_manifest(tmp_path):
    assert _run("train", "--out", tmp_path / "train") == cli.EXIT_CONFIG


def test_detect_with_missing_checkpoint(tmp_path):
    code = _run("detect", "--checkpoint", tmp_path / "absent.pt", "--input", tmp_path, "--out", tmp_path / "d")
    assert code == cli.EXIT_CHECKPOINT


# ------------------------------------------------------------------ #
# eval on hand-made score tables
# ------------------------------------------------------------------ #
def _scored_fixture(root, anomalous: int):
    """Manifest plus a score table that ranks every defect point first."""
    root.mkdir(parents=True)
    save_ply(unit_sphere(16, 0), root / "train" / "t0.ply")
    rows, manifest_rows = [], ["path,split,object_label,has_point_labels", "train/t0.ply,train,0,0"]
    for i in range(2 + anomalous):
        label = int(i >= 2)
        name = f"test/s{i}.ply"
        point_labels = np.zeros(16, dtype=np.int8)
        point_labels[:3] = label
        cloud = PointCloud(unit_sphere(16, i + 1), point_labels)
        save_ply(cloud, root / name)
        report = f"reports/s{i}.ply"
        save_ply(cloud, root / "run" / report, scores=point_labels.astype(float))
        manifest_rows.append(f"{name},test,{label},1")
        rows.append({"sample": name, "object_score": float(label), "object_label": label, "report": report})
    (root / "manifest.csv").write_text("\n".join(manifest_rows) + "\n", encoding="utf-8")
    scores = root / "run" / "scores.csv"
    pd.DataFrame(rows).to_csv(scores, index=False)
    return scores


def test_eval_perfect_scores(tmp_path):
    scores = _scored_fixture(tmp_path / "cls", anomalous=2)
    out = tmp_path / "eval"
    assert _run("eval", "--scores", scores, "--manifest", tmp_path / "cls", "--out", out) == 0
    result = json.loads((out / "eval.json").read_text(encoding="utf-8"))
    assert result["i_auroc"] == 1.0 and result["p_auroc"] == 1.0


def test_eval_single_class_exits_6(tmp_path):
    scores = _scored_fixture(tmp_path / "cls", anomalous=0)
    code = _run("eval", "--scores", scores, "--manifest", tmp_path / "cls", "--out", tmp_path / "eval")
    assert code == cli.EXIT_SINGLE_CLASS


def test_eval_missing_row(tmp_path):
    scores = _scored_fixture(tmp_path / "cls", anomalous=2)
    table = pd.read_csv(scores)
    table.iloc[:-1].to_csv(scores, index=False)
    code = _run("eval", "--scores", scores, "--manifest", tmp_path / "cls", "--out", tmp_path / "eval")
    assert code == cli.EXIT_IO


# ------------------------------------------------------------------ #
# quality
# ------------------------------------------------------------------ #
def test_quality_on_synthetic_normals(tmp_path, run_ini):
    out = tmp_path / "quality"
    assert _run("quality", "--config", run_ini, "--trials", 2, "--out", out) == 0
    report = pd.read_csv(out / "quality.csv")
    assert set(report["kind"]) == {"bulge", "sink", "damage", "oracle"}
