from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.middleware.cors import CORSMiddleware

from api.config import API_CONFIG, CHECKPOINT_ENV
from api.predict import router as predict_router
from api.schemas import StatusResponse
from core.errors import CheckpointError
from core.inference import AnomalyDetector
from core.log import get_logger

logger = get_logger("api")


# ============================================================
# FastAPI App
# ============================================================

app = FastAPI(
    title="PointMend API",
    version="1.0",
    description="Point cloud anomaly detection by diffusion reconstruction",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=API_CONFIG["cors_origins"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# ============================================================
# Load checkpoint on startup
# ============================================================

def load_detector(path=None):
    path = path or API_CONFIG["checkpoint"]
    if not path:
        logger.warning("%s is not set; /detect answers 503 until a checkpoint is loaded", CHECKPOINT_ENV)
        return None
    try:
        return AnomalyDetector(checkpoint_path=path)
    except CheckpointError as e:
        logger.error("Failed to load checkpoint: %s", e)
        return None


app.state.detector = load_detector()


# ============================================================
# Routes
# ============================================================

@app.get("/", response_model=StatusResponse)
def root():
    detector = app.state.detector
    return {
        "status": "PointMend API is running",
        "checkpoint_loaded": detector is not None,
        "num_points": detector.num_points if detector is not None else None,
    }


app.include_router(predict_router)


@app.exception_handler(RequestValidationError)
def invalid_payload(request: Request, exc: RequestValidationError):
    # 400, not the default 422
    return JSONResponse(status_code=400, content={"detail": exc.errors()})
