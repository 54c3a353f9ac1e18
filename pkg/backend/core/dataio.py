# core/dataio.py
#
# ASCII PLY read/write, the dataset manifest and the synthetic dataset builder.
#
# Directory layout:  <root>/<class>/{train,test}/<name>.ply
# Manifest:          <root>/<class>/manifest.csv
#                    columns path, split, object_label, has_point_labels
#                    (paths relative to the class directory)

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.config import PatchGenConfig
from core.errors import EmptyCloud, IoError, ManifestError, ParseError, UnsupportedFormat
from core.geom import PointCloud
from core.log import get_logger
from core.patchgen import patch_gen
from core.shapes import SyntheticShapeSpec, gen_shape

logger = get_logger("dataio")

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["path", "split", "object_label", "has_point_labels"]

_SCALAR_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}


# ------------------------------------------------------------------ #
# PLY
# ------------------------------------------------------------------ #
@dataclass
class PlyData:
    cloud: PointCloud
    scores: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None


@dataclass
class _Element:
    name: str
    count: int
    line: int
    properties: List[str] = field(default_factory=list)
    has_list: bool = False


def _parse_header(lines: List[str], path: str) -> Tuple[List[_Element], int]:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1, path=path)

    elements: List[_Element] = []
    for idx in range(1, len(lines)):
        lineno = idx + 1
        tokens = lines[idx].split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        keyword = tokens[0]
        if keyword == "format":
            if len(tokens) < 2:
                raise ParseError("malformed format line", line=lineno, path=path)
            if tokens[1] != "ascii":
                raise UnsupportedFormat(f"{path}: PLY format '{tokens[1]}' is not supported (ascii only)")
        elif keyword == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", line=lineno, path=path)
            try:
                count = int(tokens[2])
            except ValueError as exc:
                raise ParseError(f"bad element count {tokens[2]!r}", line=lineno, path=path) from exc
            if count < 0:
                raise ParseError("negative element count", line=lineno, path=path)
            elements.append(_Element(tokens[1], count, lineno))
        elif keyword == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno, path=path)
            if len(tokens) >= 2 and tokens[1] == "list":
                elements[-1].has_list = True
                elements[-1].properties.append(tokens[-1])
            elif len(tokens) == 3 and tokens[1] in _SCALAR_TYPES:
                elements[-1].properties.append(tokens[2])
            else:
                raise ParseError(f"unsupported property declaration {lines[idx].strip()!r}", line=lineno, path=path)
        elif keyword == "end_header":
            return elements, idx + 1
        else:
            raise ParseError(f"unexpected header keyword {keyword!r}", line=lineno, path=path)
    raise ParseError("missing end_header", line=len(lines), path=path)


def read_ply(path: PathLike) -> PlyData:
    """Parse an ASCII PLY with a ``vertex`` element.

    Recognised vertex properties: x, y, z (required), label, anomaly_score,
    red/green/blue. Other elements (faces, ...) are skipped.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise IoError(f"PLY file not found: {path}") from exc
    except OSError as exc:
        raise IoError(f"Could not read {path}: {exc}") from exc

    head = raw[:512].split(b"end_header", 1)[0]
    for line in head.splitlines():
        if line.startswith(b"format") and not line.startswith(b"format ascii"):
            raise UnsupportedFormat(f"{path}: binary PLY is not supported")
    try:
        lines = raw.decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise UnsupportedFormat(f"{path}: file is not ASCII") from exc

    where = str(path)
    elements, cursor = _parse_header(lines, where)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise ParseError("no vertex element in header", path=where)
    if vertex.has_list:
        raise UnsupportedFormat(f"{path}: list properties on vertices are not supported")
    missing = [p for p in ("x", "y", "z") if p not in vertex.properties]
    if missing:
        raise ParseError(f"vertex element lacks {missing}", line=vertex.line, path=where)

    rows = None
    vertex_lines: List[int] = []
    for element in elements:
        body: List[List[float]] = []
        while len(body) < element.count:
            if cursor >= len(lines):
                raise ParseError(
                    f"header declares {element.count} {element.name} rows but the file ends after {len(body)}",
                    line=element.line,
                    path=where,
                )
            text = lines[cursor].strip()
            cursor += 1
            if not text:
                continue
            if element is not vertex:
                body.append([])
                continue
            tokens = text.split()
            if len(tokens) != len(element.properties):
                raise ParseError(
                    f"expected {len(element.properties)} values, found {len(tokens)}",
                    line=cursor,
                    path=where,
                )
            try:
                body.append([float(tok) for tok in tokens])
            except ValueError as exc:
                raise ParseError(f"non-numeric value in {text!r}", line=cursor, path=where) from exc
            vertex_lines.append(cursor)
        if element is vertex:
            rows = np.asarray(body, dtype=np.float64).reshape(len(body), len(element.properties))

    for extra in range(cursor, len(lines)):
        if lines[extra].strip():
            raise ParseError(
                "data beyond the declared element counts (vertex count mismatch?)",
                line=extra + 1,
                path=where,
            )

    if rows is None or rows.shape[0] == 0:
        raise EmptyCloud(f"{path} contains no vertices")

    col = {name: i for i, name in enumerate(vertex.properties)}
    points = rows[:, [col["x"], col["y"], col["z"]]]
    labels = None
    if "label" in col:
        raw_labels = rows[:, col["label"]]
        bad = np.flatnonzero((raw_labels != 0.0) & (raw_labels != 1.0))
        if bad.size:
            raise ParseError(
                f"label must be 0 or 1, found {raw_labels[bad[0]]:g}",
                line=vertex_lines[bad[0]],
                path=where,
            )
        labels = raw_labels.astype(np.int8)
    scores = rows[:, col["anomaly_score"]].copy() if "anomaly_score" in col else None
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = rows[:, [col["red"], col["green"], col["blue"]]].astype(np.uint8)
    try:
        cloud = PointCloud(points, labels)
    except ValueError as exc:
        raise ParseError(str(exc), path=where) from exc
    return PlyData(cloud=cloud, scores=scores, colors=colors)


def load_ply(path: PathLike) -> PointCloud:
    return read_ply(path).cloud


def save_ply(
    pc: Union[PointCloud, np.ndarray],
    path: PathLike,
    scores: Optional[Sequence[float]] = None,
    colors: Optional[np.ndarray] = None,
) -> Path:
    """Write ``pc`` as ASCII PLY (17 significant digits per coordinate)."""
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    labels = pc.labels if isinstance(pc, PointCloud) else None
    n = points.shape[0]
    if n == 0:
        raise EmptyCloud(f"refusing to write an empty cloud to {path}")

    score_arr = None if scores is None else np.asarray(scores, dtype=np.float64).reshape(-1)
    if score_arr is not None and score_arr.shape[0] != n:
        raise IoError(f"{score_arr.shape[0]} scores for {n} points")
    color_arr = None if colors is None else np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if color_arr is not None and color_arr.shape[0] != n:
        raise IoError(f"{color_arr.shape[0]} colors for {n} points")

    header = ["ply", "format ascii 1.0", f"element vertex {n}"]
    header += [f"property double {axis}" for axis in ("x", "y", "z")]
    if labels is not None:
        header.append("property uchar label")
    if score_arr is not None:
        header.append("property double anomaly_score")
    if color_arr is not None:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")

    body = []
    for i in range(n):
        fields = [format(float(v), ".17g") for v in points[i]]
        if labels is not None:
            fields.append(str(int(labels[i])))
        if score_arr is not None:
            fields.append(format(float(score_arr[i]), ".17g"))
        if color_arr is not None:
            fields += [str(int(c)) for c in color_arr[i]]
        body.append(" ".join(fields))

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(header + body))
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"Could not write {path}: {exc}") from exc
    return path


# ------------------------------------------------------------------ #
# Manifest
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class TestEntry:
    path: Path
    object_label: int
    has_point_labels: bool


@dataclass
class DatasetManifest:
    class_name: str
    root: Path
    train: List[Path]
    test: List[TestEntry]

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"path": p.relative_to(self.root).as_posix(), "split": "train", "object_label": 0, "has_point_labels": 0}
            for p in self.train
        ]
        rows += [
            {
                "path": e.path.relative_to(self.root).as_posix(),
                "split": "test",
                "object_label": int(e.object_label),
                "has_point_labels": int(e.has_point_labels),
            }
            for e in self.test
        ]
        return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


def write_manifest(manifest: DatasetManifest) -> Path:
    try:
        manifest.root.mkdir(parents=True, exist_ok=True)
        manifest.to_frame().to_csv(manifest.path, index=False, lineterminator="\n")
    except OSError as exc:
        raise IoError(f"Could not write manifest {manifest.path}: {exc}") from exc
    return manifest.path


def load_manifest(path: PathLike) -> DatasetManifest:
    """Read a manifest file (or a class directory holding one); every listed file must exist."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    try:
        frame = pd.read_csv(path, dtype={"path": str, "split": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f"unreadable manifest: {exc}", path=str(path)) from exc

    missing_cols = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing_cols:
        raise ParseError(f"manifest lacks columns {missing_cols}", line=1, path=str(path))

    root = path.parent
    train: List[Path] = []
    test: List[TestEntry] = []
    missing: List[str] = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        lineno = offset + 2
        split = str(row.split).strip()
        try:
            obj_label = int(row.object_label)
            point_labels = int(row.has_point_labels)
        except (TypeError, ValueError) as exc:
            raise ParseError("labels must be integers", line=lineno, path=str(path)) from exc
        if obj_label not in (0, 1) or point_labels not in (0, 1):
            raise ParseError("labels must be binary", line=lineno, path=str(path))
        file_path = root / str(row.path)
        if not file_path.exists():
            missing.append(str(file_path))
        if split == "train":
            if obj_label != 0:
                raise ParseError("training samples must be normal", line=lineno, path=str(path))
            train.append(file_path)
        elif split == "test":
            test.append(TestEntry(file_path, obj_label, bool(point_labels)))
        else:
            raise ParseError(f"unknown split {split!r}", line=lineno, path=str(path))

    if missing:
        raise ManifestError(f"{len(missing)} manifest file(s) missing, e.g. {missing[0]}")
    if not train:
        raise ParseError("manifest has no training samples", path=str(path))
    return DatasetManifest(class_name=root.name, root=root, train=train, test=test)


def load_split(manifest: DatasetManifest) -> Tuple[List[PointCloud], List[Tuple[PointCloud, int]]]:
    """(training normals, [(test cloud, object label), ...]) in manifest order."""
    train = [load_ply(p) for p in manifest.train]
    test = []
    for entry in manifest.test:
        cloud = load_ply(entry.path)
        if not entry.has_point_labels and cloud.has_labels:
            cloud = PointCloud(cloud.points)
        test.append((cloud, entry.object_label))
    return train, test


# ------------------------------------------------------------------ #
# Synthetic dataset
# ------------------------------------------------------------------ #
def _stream_seed(seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream, index]).generate_state(1)[0])


# seed streams; the anomaly stream never coincides with training augmentation
_TRAIN, _TEST_NORMAL, _TEST_BASE, _TEST_DEFECT = range(4)


def build_synthetic_dataset(
    spec: SyntheticShapeSpec,
    root: PathLike,
    class_name: str,
    n_train: int = 4,
    n_test_normal: int = 25,
    n_test_anomalous: int = 25,
    patchgen: Optional[PatchGenConfig] = None,
    seed: int = 0,
) -> DatasetManifest:
    """Write normals plus Patch-Gen test anomalies and return their manifest."""
    for name, count in (("n_train", n_train), ("n_test_normal", n_test_normal), ("n_test_anomalous", n_test_anomalous)):
        if count < 1:
            raise ValueError(f"{name} must be >= 1, got {count}")
    patchgen = patchgen or PatchGenConfig()
    class_dir = Path(root) / class_name

    def _shape(stream: int, index: int) -> PointCloud:
        return gen_shape(SyntheticShapeSpec(spec.kind, spec.num_points, spec.params, spec.jitter, _stream_seed(seed, stream, index)))

    train: List[Path] = []
    for i in range(n_train):
        train.append(save_ply(_shape(_TRAIN, i), class_dir / "train" / f"train_{i:03d}.ply"))

    test: List[TestEntry] = []
    for i in range(n_test_normal):
        cloud = _shape(_TEST_NORMAL, i)
        cloud = PointCloud(cloud.points, np.zeros(len(cloud), dtype=np.int8))
        test.append(TestEntry(save_ply(cloud, class_dir / "test" / f"good_{i:03d}.ply"), 0, True))

    for i in range(n_test_anomalous):
        base = _shape(_TEST_BASE, i)
        cfg = patchgen.copy(update={"seed": _stream_seed(seed, _TEST_DEFECT, i), "rotate": False})
        sample = patch_gen(base, cfg)
        out = save_ply(sample.anomalous, class_dir / "test" / f"defect_{i:03d}.ply")
        write_sidecar(out, sample.meta)
        test.append(TestEntry(out, 1, True))

    manifest = DatasetManifest(class_name=class_name, root=class_dir, train=train, test=test)
    write_manifest(manifest)
    logger.info(
        "Synthetic class '%s': %d train / %d good / %d defect samples in %s",
        class_name, n_train, n_test_normal, n_test_anomalous, class_dir,
    )
    return manifest


def write_sidecar(ply_path: Path, meta: Dict) -> Path:
    path = Path(ply_path).with_suffix(".json")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"Could not write {path}: {exc}") from exc
    return path
