"""Self-supervised training loop for the PointMend reconstruction model."""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from core.config import TrainConfig
from core.diffusion import NoiseSchedule, estimate_x0, linear_schedule
from core.errors import CheckpointError, EmptyPool, PointCountMismatch, ShapeMismatch, TrainingDiverged
from core.geom import PointCloud, downsample_random, normalize_cloud
from core.log import get_logger
from core.model import (
    Checkpoint,
    DiffusionModel,
    TrainingTuple,
    forward_batch,
    init_params,
    save_checkpoint,
)
from core.patchgen import patch_gen

logger = get_logger("train")

CHECKPOINT_NAME = "checkpoint.pt"
METRICS_NAME = "metrics.csv"
METRIC_COLUMNS = ["iteration", "noise_loss", "recon_mse", "intact_mse", "wall_ms"]

# Keys that may change between a checkpoint and the run resuming it.
_RESUMABLE_KEYS = {"iterations", "log_every"}


# ------------------------------------------------------------------ #
# Adam
# ------------------------------------------------------------------ #
@dataclass
class AdamState:
    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor]) -> "AdamState":
        return cls(
            step=0,
            exp_avg={k: torch.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: torch.zeros_like(v) for k, v in params.items()},
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "exp_avg": {k: v.clone() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.clone() for k, v in self.exp_avg_sq.items()},
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "AdamState":
        return cls(
            step=int(payload["step"]),
            exp_avg={k: v.clone() for k, v in payload["exp_avg"].items()},
            exp_avg_sq={k: v.clone() for k, v in payload["exp_avg_sq"].items()},
        )


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[Mapping[str, torch.Tensor], AdamState]:
    """Bias-corrected Adam, applied in place to ``params``."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if set(params) != set(grads) or set(params) != set(state.exp_avg):
        raise ShapeMismatch("parameters, gradients and optimizer state must share the same keys")
    for name, p in params.items():
        if grads[name].shape != p.shape or state.exp_avg[name].shape != p.shape:
            raise ShapeMismatch(f"shape mismatch for {name}: {tuple(p.shape)}")

    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.exp_avg[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = state.exp_avg_sq[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bias2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bias1)
    return params, state


# ------------------------------------------------------------------ #
# One iteration
# ------------------------------------------------------------------ #
def build_schedule(cfg: TrainConfig) -> NoiseSchedule:
    s = cfg.schedule
    return linear_schedule(s.t_max, s.beta_start, s.beta_end, strict=s.strict)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_batch(normal_pool: Sequence[PointCloud], cfg: TrainConfig, iter_index: int) -> List[TrainingTuple]:
    """Draw, normalise, downsample and defect ``cfg.batch_size`` training pairs."""
    if not normal_pool:
        raise EmptyPool("training needs at least one normal cloud")
    rng = np.random.default_rng(_seed(cfg.seed, iter_index))
    picks = rng.integers(len(normal_pool), size=cfg.batch_size)

    batch = []
    for b, pick in enumerate(picks):
        pc, _ = normalize_cloud(normal_pool[int(pick)])
        if len(pc) < cfg.num_points:
            raise PointCountMismatch(
                f"pool cloud {int(pick)} has {len(pc)} points, training needs {cfg.num_points}"
            )
        pc = downsample_random(pc, cfg.num_points, _seed(cfg.seed, iter_index, b, 0))
        if cfg.use_patchgen:
            sample = patch_gen(pc, cfg.patchgen.copy(update={"seed": _seed(cfg.seed, iter_index, b, 1)}))
            batch.append(TrainingTuple(sample.anomalous.points, sample.gt_displacement))
        else:
            batch.append(TrainingTuple(pc.points, np.zeros_like(pc.points)))
    return batch


def train_iteration(
    normal_pool: Sequence[PointCloud],
    model: DiffusionModel,
    adam: AdamState,
    cfg: TrainConfig,
    iter_index: int,
    sched: Optional[NoiseSchedule] = None,
) -> Tuple[DiffusionModel, AdamState, Dict[str, float]]:
    start = time.perf_counter()
    sched = sched or build_schedule(cfg)
    batch = make_batch(normal_pool, cfg, iter_index)

    fwd = forward_batch(batch, model, sched, _seed(cfg.seed, iter_index, 2**31 - 1))
    noise_loss = float(fwd.loss.detach())
    if not math.isfinite(noise_loss):
        raise TrainingDiverged(iter_index, noise_loss)

    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(fwd.loss, params)
    with torch.no_grad():
        x0_hat = estimate_x0(fwd.delta_t, fwd.eps_pred, fwd.steps, sched)
        # (anomalous + x0_hat) vs target, where target = anomalous + displacement
        sq_err = (fwd.displacement - x0_hat) ** 2
        recon_mse = float(sq_err.mean())
        # points PatchGen left in place; their clean target is the input itself
        intact = (fwd.displacement == 0).all(dim=-1)
        intact_mse = float(sq_err[intact].mean()) if bool(intact.any()) else float("nan")

    adam_step(
        dict(zip(names, params)),
        {n: g.detach() for n, g in zip(names, grads)},
        adam,
        cfg.learning_rate,
        (cfg.adam_beta1, cfg.adam_beta2),
        cfg.adam_eps,
    )
    metrics = {
        "iteration": int(iter_index),
        "noise_loss": noise_loss,
        "recon_mse": recon_mse,
        "intact_mse": intact_mse,
        "wall_ms": (time.perf_counter() - start) * 1000.0,
    }
    return model, adam, metrics


# ------------------------------------------------------------------ #
# Full run
# ------------------------------------------------------------------ #
def _check_resumable(cfg: TrainConfig, ckpt: Checkpoint) -> None:
    old = {k: v for k, v in ckpt.train_config.dict().items() if k not in _RESUMABLE_KEYS}
    new = {k: v for k, v in cfg.dict().items() if k not in _RESUMABLE_KEYS}
    if old != new:
        changed = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
        raise CheckpointError(f"cannot resume: config differs from the checkpoint in {changed}")


def _flush_metrics(rows: List[Dict[str, float]], path: Optional[Path]) -> None:
    if not rows or path is None:
        return
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, lineterminator="\n")
    rows.clear()


def train(
    normal_pool: Sequence[PointCloud],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Run iterations ``resume.iteration + 1 .. cfg.iterations``; save to ``out_dir`` if given."""
    if not normal_pool:
        raise EmptyPool("training needs at least one normal cloud")
    sched = build_schedule(cfg)

    if resume is not None:
        _check_resumable(cfg, resume)
        model = resume.model
        adam = (
            AdamState.from_dict(resume.optimizer)
            if resume.optimizer
            else AdamState.zeros_like(dict(model.named_parameters()))
        )
        start_iter = resume.iteration
        logger.info("Resuming from iteration %d", start_iter)
    else:
        model = init_params(cfg.seed, cfg.model)
        adam = AdamState.zeros_like(dict(model.named_parameters()))
        start_iter = 0

    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_NAME

    logger.info(
        "=== Training: %d iterations, batch %d, %d points, T=%d ===",
        cfg.iterations, cfg.batch_size, cfg.num_points, sched.t_max,
    )
    started = time.time()
    pending: List[Dict[str, float]] = []
    model.train()
    for i in range(start_iter + 1, cfg.iterations + 1):
        model, adam, metrics = train_iteration(normal_pool, model, adam, cfg, i, sched)
        pending.append(metrics)
        if i == 1 or i % cfg.log_every == 0 or i == cfg.iterations:
            logger.info(
                "iter %d | noise_loss %.6f | recon_mse %.6f | intact_mse %.6f | %.0f ms",
                i, metrics["noise_loss"], metrics["recon_mse"], metrics["intact_mse"], metrics["wall_ms"],
            )
            _flush_metrics(pending, metrics_path)
    _flush_metrics(pending, metrics_path)
    model.eval()

    ckpt = Checkpoint(
        model=model,
        schedule=sched,
        train_config=cfg,
        iteration=max(start_iter, cfg.iterations),
        optimizer=adam.to_dict(),
    )
    if out_dir is not None:
        path = save_checkpoint(ckpt, out_dir / CHECKPOINT_NAME)
        logger.info("Checkpoint written to %s", path)
    logger.info("=== Training finished in %.1f s ===", time.time() - started)
    return ckpt


if __name__ == "__main__":
    from cli import main

    sys.exit(main(["train", *sys.argv[1:]]))
