"""Console logging in the bracketed-level style used across the backend."""

from __future__ import annotations

import logging
import os

from dotenv import load_dotenv

load_dotenv()

LOG_ENV = "R3DAD_LOG"
LOG_FORMAT = "[%(levelname)s] %(message)s"

_configured = False


def _resolve_level() -> int:
    raw = os.getenv(LOG_ENV, "INFO").strip().upper()
    if raw == "WARN":
        raw = "WARNING"
    level = logging.getLevelName(raw)
    return level if isinstance(level, int) else logging.INFO


def configure(level: int | None = None) -> None:
    """(Re)configure the ``pointmend`` logger tree."""
    global _configured
    root = logging.getLogger("pointmend")
    if not _configured:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        _configured = True
    root.setLevel(level if level is not None else _resolve_level())


def get_logger(name: str) -> logging.Logger:
    if not _configured:
        configure()
    return logging.getLogger(f"pointmend.{name}")
