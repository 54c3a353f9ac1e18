from fastapi import APIRouter, HTTPException, Request
from pydantic import ValidationError

import numpy as np

from api.schemas import AugmentRequest, AugmentResponse, DetectRequest, DetectResponse
from core.config import PatchGenConfig
from core.errors import PointMendError
from core.geom import PointCloud, normalize_cloud
from core.log import get_logger
from core.patchgen import patch_gen
from training.evaluate import auroc

logger = get_logger("api")

router = APIRouter()


@router.post("/detect", response_model=DetectResponse)
def detect(req: DetectRequest, request: Request):
    """
    Anomaly scores for one cloud. Requires a detector in app.state.detector.
    """
    detector = getattr(request.app.state, "detector", None)
    if detector is None:
        raise HTTPException(
            status_code=503,
            detail="No checkpoint loaded. Set POINTMEND_CHECKPOINT and restart.",
        )

    try:
        points = np.asarray(req.points, dtype=np.float64)
        body = detector.predict(points, k=req.k, seed=req.seed, top_fraction=req.top_fraction, labels=req.labels)
        if req.labels is not None:
            kept = np.asarray(req.labels)[body["indices"]]
            # P-AUROC is undefined unless the kept points hold both classes
            if 0 < kept.sum() < kept.size:
                body["p_auroc"] = auroc(body["point_scores"], kept)
        return body
    except (PointMendError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/augment", response_model=AugmentResponse)
def augment(req: AugmentRequest):
    """
    Patch-Gen on a raw cloud; coordinates come back normalised.
    """
    updates = {"seed": req.seed, "rotate": req.rotate}
    if req.ratio is not None:
        updates["selection_ratio"] = req.ratio
    if req.scale is not None:
        updates["scale_s"] = req.scale
    if req.kind is not None:
        updates["kind"] = req.kind

    try:
        cfg = PatchGenConfig(**updates)
        pc, _ = normalize_cloud(PointCloud(np.asarray(req.points, dtype=np.float64)))
        sample = patch_gen(pc, cfg)
    except (ValidationError, PointMendError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))

    return {
        "anomalous": sample.anomalous.points.tolist(),
        "target": sample.target.points.tolist(),
        "mask": sample.defect_mask.astype(int).tolist(),
        "gt_displacement": sample.gt_displacement.tolist(),
        "kind": sample.meta["kind"],
        "patch_size": sample.meta["patch_size"],
    }
