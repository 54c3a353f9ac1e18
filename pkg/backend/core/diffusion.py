# core/diffusion.py
#
# DDPM machinery over displacement fields: a linear variance schedule, the
# forward masking process, the reverse posterior step and the clean-sample
# estimator. Tables are float64 numpy arrays; the step functions operate on
# torch tensors so they sit inside the autograd graph during training.

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from core.errors import InvalidSchedule, NoiseAtFinalStep, ShapeMismatch
from core.geom import PointCloud
from core.log import get_logger

logger = get_logger("diffusion")

# The chain must end close to pure noise.
MASKING_THRESHOLD = 0.01

Step = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """β_1..β_T and the tables derived from them.

    Tables are indexed by ``t - 1``; ``alpha_bar(0)`` is defined as 1.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64, copy=True).reshape(-1)
        if betas.size < 1:
            raise InvalidSchedule("schedule needs at least one step")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise InvalidSchedule("every beta must lie in (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise InvalidSchedule("betas must be non-decreasing")

        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise InvalidSchedule("alpha_bar must be strictly decreasing")
        sigmas = np.sqrt(betas)

        for name, table in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars), ("sigmas", sigmas)):
            table.setflags(write=False)
            object.__setattr__(self, name, table)

    # -------------------------------------------------------------- #
    @property
    def t_max(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, t: int) -> float:
        return float(self.betas[self._index(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._index(t)])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._index(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._index(t)])

    @property
    def final_alpha_bar(self) -> float:
        return float(self.alpha_bars[-1])

    def _index(self, t: int) -> int:
        if not 1 <= int(t) <= self.t_max:
            raise ValueError(f"step t={t} outside [1, {self.t_max}]")
        return int(t) - 1

    def to_dict(self) -> Dict[str, Any]:
        return {"t_max": self.t_max, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NoiseSchedule":
        sched = cls(np.asarray(payload["betas"], dtype=np.float64))
        if sched.t_max != int(payload.get("t_max", sched.t_max)):
            raise InvalidSchedule("stored t_max does not match the stored betas")
        return sched


def linear_schedule(t_max: int, beta_start: float, beta_end: float, strict: bool = False) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` over ``t_max`` steps."""
    if t_max < 1:
        raise InvalidSchedule(f"t_max must be >= 1, got {t_max}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidSchedule(
            f"require 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )
    sched = NoiseSchedule(np.linspace(beta_start, beta_end, t_max, dtype=np.float64))

    if sched.final_alpha_bar >= MASKING_THRESHOLD:
        message = (
            f"alpha_bar at T={t_max} is {sched.final_alpha_bar:.4f} "
            f"(>= {MASKING_THRESHOLD}); the chain does not fully mask the input"
        )
        if strict:
            raise InvalidSchedule(message)
        logger.warning(message)
    return sched


# ------------------------------------------------------------------ #
# Step helpers
# ------------------------------------------------------------------ #
def _check_step(t: Step, sched: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > sched.t_max:
            raise ValueError(f"steps must lie in [1, {sched.t_max}]")
    elif not 1 <= int(t) <= sched.t_max:
        raise ValueError(f"step t={t} outside [1, {sched.t_max}]")


def _coef(values: np.ndarray, t: Step, like: torch.Tensor) -> Union[float, torch.Tensor]:
    """Scalar for an int step; a (B, 1, 1) tensor for a per-sample step vector."""
    if not isinstance(t, torch.Tensor):
        return float(values[int(t) - 1])
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    picked = table[t.long() - 1]
    if like.dim() < 2 or picked.shape[0] != like.shape[0]:
        raise ShapeMismatch(f"{picked.shape[0]} steps for a tensor of shape {tuple(like.shape)}")
    return picked.reshape(-1, *([1] * (like.dim() - 1)))


def _as_tensor(x: Any) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, PointCloud):
        x = x.points.copy()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _sqrt(value: Union[float, torch.Tensor]) -> Union[float, torch.Tensor]:
    return math.sqrt(value) if isinstance(value, float) else torch.sqrt(value)


# ------------------------------------------------------------------ #
# Forward / reverse
# ------------------------------------------------------------------ #
def forward_sample(x0: Any, t: Step, eps: Any, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps."""
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    _same_shape(x0, eps, "x0 and eps")
    _check_step(t, sched)
    abar = _coef(sched.alpha_bars, t, x0)
    return _sqrt(abar) * x0 + _sqrt(1.0 - abar) * eps


def estimate_x0(x_t: Any, eps_pred: Any, t: Step, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise estimate."""
    x_t, eps_pred = _as_tensor(x_t), _as_tensor(eps_pred)
    _same_shape(x_t, eps_pred, "x_t and eps_pred")
    _check_step(t, sched)
    abar = _coef(sched.alpha_bars, t, x_t)
    return (x_t - _sqrt(1.0 - abar) * eps_pred) / _sqrt(abar)


def posterior_step(
    delta_t: Any,
    eps_pred: Any,
    t: Step,
    z: Optional[Any],
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One reverse update Δ_t -> Δ_{t-1}.

    Δ_{t-1} = (Δ_t − (1 − α_t)/sqrt(1 − ᾱ_t)·ε) / sqrt(α_t) + σ_t·z, with
    ``z`` required to be zero (or None) at t = 1.
    """
    delta_t, eps_pred = _as_tensor(delta_t), _as_tensor(eps_pred)
    _same_shape(delta_t, eps_pred, "delta_t and eps_pred")
    _check_step(t, sched)

    if z is not None:
        z = _as_tensor(z)
        _same_shape(delta_t, z, "delta_t and z")
        if isinstance(t, torch.Tensor):
            final = (t == 1).reshape(-1)
            if bool(final.any()) and bool(torch.any(z[final] != 0)):
                raise NoiseAtFinalStep("z must be zero at t = 1")
        elif int(t) == 1 and bool(torch.any(z != 0)):
            raise NoiseAtFinalStep("z must be zero at t = 1")

    alpha = _coef(sched.alphas, t, delta_t)
    abar = _coef(sched.alpha_bars, t, delta_t)
    mean = (delta_t - (1.0 - alpha) / _sqrt(1.0 - abar) * eps_pred) / _sqrt(alpha)
    if z is None:
        return mean
    return mean + _coef(sched.sigmas, t, delta_t) * z
