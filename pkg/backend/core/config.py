# core/config.py
#
# Typed run configuration. Every section of the INI config file maps onto one
# pydantic model; unknown keys are rejected and numeric fields are checked
# against the module invariants at parse time.

from __future__ import annotations

import configparser
import hashlib
import json
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import BaseModel, ValidationError, validator

from core.errors import ConfigError, InvalidWidths


class DefectKind(str, Enum):
    BULGE = "bulge"
    SINK = "sink"
    DAMAGE = "damage"


class ShapeKind(str, Enum):
    SPHERE = "sphere"
    TORUS = "torus"
    BOX = "box"
    ELLIPSOID = "ellipsoid"


def parse_ratio(value: Any) -> float:
    """Accept ``0.03125``, ``"0.03125"`` or ``"1/32"``."""
    if isinstance(value, str):
        value = value.strip()
        if "/" in value:
            return float(Fraction(value))
    return float(value)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True
        use_enum_values = False


# ------------------------------------------------------------------ #
# Sections
# ------------------------------------------------------------------ #
class PatchGenConfig(_Section):
    selection_ratio: float = 1 / 32
    scale_s: float = 0.1
    kind: Optional[DefectKind] = None  # None: drawn uniformly per sample
    rotate: bool = True
    seed: int = 0
    literal_target: bool = False

    _ratio = validator("selection_ratio", pre=True, allow_reuse=True)(parse_ratio)

    @validator("selection_ratio")
    def _ratio_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("selection_ratio must be in (0, 1]")
        return value

    @validator("scale_s")
    def _scale_non_negative(cls, value: float) -> float:
        if value < 0.0:
            raise ValueError("scale_s must be >= 0")
        return value

    @validator("kind", pre=True)
    def _kind_name(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = value.strip().lower()
            if value in ("", "random", "any", "none"):
                return None
        return value


class ScheduleConfig(_Section):
    t_max: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05
    strict: bool = False

    @validator("t_max")
    def _steps_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("t_max must be >= 1")
        return value

    @validator("beta_end")
    def _betas_ordered(cls, value: float, values: Dict[str, Any]) -> float:
        start = values.get("beta_start")
        if start is not None and not 0.0 < start <= value < 1.0:
            raise ValueError("require 0 < beta_start <= beta_end < 1")
        return value


class ModelConfig(_Section):
    encoder_widths: List[int] = [128, 256, 512]
    embedding_dim: int = 256
    denoiser_widths: List[int] = [128, 256, 512, 256, 128]
    use_condition: bool = True
    point_anchor: bool = True

    _lists = validator("encoder_widths", "denoiser_widths", pre=True, allow_reuse=True)(_split_list)

    @property
    def context_dim(self) -> int:
        return self.embedding_dim + 3

    @property
    def point_in_dim(self) -> int:
        return 6 if self.point_anchor else 3


EMBEDDING_DIM = 256


def validate_widths(cfg: ModelConfig) -> None:
    if not cfg.encoder_widths or not cfg.denoiser_widths:
        raise InvalidWidths("encoder and denoiser need at least one hidden layer")
    for name, widths in (("encoder_widths", cfg.encoder_widths), ("denoiser_widths", cfg.denoiser_widths)):
        bad = [w for w in widths if w <= 0]
        if bad:
            raise InvalidWidths(f"{name} contains non-positive width(s): {bad}")
    if cfg.embedding_dim != EMBEDDING_DIM:
        raise InvalidWidths(f"embedding_dim is fixed at {EMBEDDING_DIM}, got {cfg.embedding_dim}")


class TrainSection(_Section):
    """Scalar keys of the ``[train]`` section."""

    learning_rate: float = 1e-3
    batch_size: int = 16
    iterations: int = 2000
    seed: int = 0
    num_points: int = 1024
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 50
    use_patchgen: bool = True

    @validator("learning_rate")
    def _lr_positive(cls, value: float) -> float:
        if value <= 0.0:
            raise ValueError("learning_rate must be > 0")
        return value

    @validator("batch_size", "iterations", "num_points", "log_every")
    def _count_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @validator("adam_beta1", "adam_beta2")
    def _beta_range(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError("Adam betas must be in [0, 1)")
        return value


class TrainConfig(TrainSection):
    patchgen: PatchGenConfig = PatchGenConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()

    def digest(self) -> str:
        payload = json.dumps(json.loads(self.json()), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class DetectConfig(_Section):
    k: int = 8
    top_fraction: float = 0.01
    threads: Optional[int] = None
    seed: int = 0

    @validator("k")
    def _k_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("k must be >= 1")
        return value

    @validator("top_fraction")
    def _fraction_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("top_fraction must be in (0, 1]")
        return value


class SynthConfig(_Section):
    class_name: str = "sphere"
    shape: ShapeKind = ShapeKind.SPHERE
    num_points: int = 1024
    params: List[float] = []
    jitter: float = 0.0
    n_train: int = 4
    n_test_normal: int = 25
    n_test_anomalous: int = 25
    seed: int = 0

    _params = validator("params", pre=True, allow_reuse=True)(_split_list)

    @validator("n_train", "n_test_normal", "n_test_anomalous")
    def _count_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value


class PathsConfig(_Section):
    manifest: Optional[Path] = None
    checkpoint: Optional[Path] = None
    scores: Optional[Path] = None
    input: Optional[Path] = None
    out: Optional[Path] = None


class RunConfig(_Section):
    patchgen: PatchGenConfig = PatchGenConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()
    train: TrainSection = TrainSection()
    detect: DetectConfig = DetectConfig()
    synth: SynthConfig = SynthConfig()
    paths: PathsConfig = PathsConfig()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **self.train.dict(),
            patchgen=self.patchgen,
            schedule=self.schedule,
            model=self.model,
        )


SECTIONS = tuple(RunConfig.__fields__)


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(loc) for loc in err["loc"])
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def read_ini(path: Path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case for error messages
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config file {path}: {exc}") from exc

    if parser.defaults():
        raise ConfigError(f"Keys outside a section are not allowed: {sorted(parser.defaults())}")
    sections: Dict[str, Dict[str, str]] = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section [{name}] (expected one of {list(SECTIONS)})")
        sections[name] = dict(parser.items(name))
    return sections


def build_run_config(
    file_values: Optional[Mapping[str, Mapping[str, Any]]] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> RunConfig:
    """Merge file values with flag overrides (flags win) and validate."""
    merged: Dict[str, Dict[str, Any]] = {}
    for source in (file_values or {}, overrides or {}):
        for section, values in source.items():
            if section not in SECTIONS:
                raise ConfigError(f"Unknown config section [{section}]")
            for key, value in values.items():
                if value is None:
                    continue
                merged.setdefault(section, {})[key] = value
    try:
        cfg = RunConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc
    try:
        validate_widths(cfg.model)
    except InvalidWidths as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> RunConfig:
    file_values = read_ini(Path(path)) if path else {}
    return build_run_config(file_values, overrides)


def write_resolved(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.json(indent=2, sort_keys=True))
        fh.write("\n")
    return path
