"""Exception hierarchy shared by every PointMend module.

Each error also derives from the closest builtin so callers that only know
about ``ValueError`` / ``RuntimeError`` / ``OSError`` keep working.
"""

from __future__ import annotations

from typing import Optional


class PointMendError(Exception):
    """Base class for all library errors."""


# ------------------------------------------------------------------ #
# Geometry / inputs
# ------------------------------------------------------------------ #
class DegenerateCloud(PointMendError, ValueError):
    pass


class KTooLarge(PointMendError, ValueError):
    pass


class LengthMismatch(PointMendError, ValueError):
    pass


class SelectionTooLarge(PointMendError, ValueError):
    pass


class InvalidSpec(PointMendError, ValueError):
    pass


# ------------------------------------------------------------------ #
# Diffusion / model
# ------------------------------------------------------------------ #
class InvalidSchedule(PointMendError, ValueError):
    pass


class ShapeMismatch(PointMendError, ValueError):
    pass


class NoiseAtFinalStep(PointMendError, ValueError):
    pass


class InvalidWidths(PointMendError, ValueError):
    pass


# ------------------------------------------------------------------ #
# Training
# ------------------------------------------------------------------ #
class EmptyBatch(PointMendError, ValueError):
    pass


class EmptyPool(PointMendError, ValueError):
    pass


class TrainingDiverged(PointMendError, RuntimeError):
    def __init__(self, iteration: int, noise_loss: float):
        super().__init__(
            f"Loss became non-finite at iteration {iteration} (noise_loss={noise_loss}); aborting."
        )
        self.iteration = iteration
        self.noise_loss = noise_loss


class CheckpointError(PointMendError, RuntimeError):
    pass


class PointCountMismatch(PointMendError, ValueError):
    pass


# ------------------------------------------------------------------ #
# Evaluation
# ------------------------------------------------------------------ #
class SingleClass(PointMendError, ValueError):
    pass


class MissingPointLabels(PointMendError, ValueError):
    pass


# ------------------------------------------------------------------ #
# I/O and configuration
# ------------------------------------------------------------------ #
class ParseError(PointMendError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else ''}line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class UnsupportedFormat(PointMendError, ValueError):
    pass


class IoError(PointMendError, OSError):
    pass


class EmptyCloud(IoError):
    pass


class ManifestError(PointMendError, FileNotFoundError):
    pass


class ConfigError(PointMendError, ValueError):
    pass
