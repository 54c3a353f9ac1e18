# api/schemas.py
from typing import List, Optional

from pydantic import BaseModel, validator

from core.config import DefectKind, parse_ratio


class CloudPayload(BaseModel):
    points: List[List[float]]

    @validator("points")
    def _xyz_rows(cls, value: List[List[float]]) -> List[List[float]]:
        if not value:
            raise ValueError("points must not be empty")
        if any(len(row) != 3 for row in value):
            raise ValueError("every point needs exactly 3 coordinates")
        return value


class DetectRequest(CloudPayload):
    labels: Optional[List[int]] = None
    k: int = 8
    seed: int = 0
    top_fraction: float = 0.01

    @validator("labels")
    def _binary(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(v not in (0, 1) for v in value):
            raise ValueError("labels must be 0 or 1")
        return value


class DetectResponse(BaseModel):
    indices: List[int]
    point_scores: List[float]
    object_score: float
    reconstruction: List[List[float]]
    p_auroc: Optional[float] = None


class AugmentRequest(CloudPayload):
    ratio: Optional[str] = None
    scale: Optional[float] = None
    kind: Optional[str] = None
    seed: int = 0
    rotate: bool = True

    @validator("ratio")
    def _ratio(cls, value: Optional[str]) -> Optional[str]:
        if value is not None:
            parse_ratio(value)
        return value

    @validator("kind")
    def _kind(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value.strip().lower() not in ("random", "") + tuple(k.value for k in DefectKind):
            raise ValueError(f"kind must be one of {[k.value for k in DefectKind]} or 'random'")
        return value


class AugmentResponse(BaseModel):
    anomalous: List[List[float]]
    target: List[List[float]]
    mask: List[int]
    gt_displacement: List[List[float]]
    kind: str
    patch_size: int


class StatusResponse(BaseModel):
    status: str
    checkpoint_loaded: bool
    num_points: Optional[int] = None
