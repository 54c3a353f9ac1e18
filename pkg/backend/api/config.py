from dotenv import load_dotenv
import os

load_dotenv()

CHECKPOINT_ENV = "POINTMEND_CHECKPOINT"

API_CONFIG = {
    "checkpoint": os.getenv(CHECKPOINT_ENV),
    "cors_origins": [o.strip() for o in os.getenv("POINTMEND_CORS", "http://localhost:3000").split(",") if o.strip()],
}
