# core/model.py
#
# Learnable networks of the reconstruction model:
#   1. PointEncoder: point-wise MLP, max-pool, linear head -> 256-d shape
#      embedding c.
#   2. PointwiseDenoiser: stack of concat-squash layers conditioned on
#      (c, β_t, sin β_t, cos β_t) predicting the noise on a displacement field,
#      with a residual connection back to the input displacement.
# Everything runs in float64 on CPU. Gradients come from torch.autograd and are
# handed back as a name -> tensor mapping so the optimiser stays framework-light.

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from core.config import ModelConfig, TrainConfig, validate_widths
from core.diffusion import NoiseSchedule, forward_sample
from core.errors import CheckpointError, EmptyBatch, ShapeMismatch
from core.geom import PointCloud

DTYPE = torch.float64

GradientSet = Dict[str, torch.Tensor]


def time_embedding(beta: torch.Tensor) -> torch.Tensor:
    """(β, sin β, cos β) per sample; ``beta`` has shape (B,)."""
    beta = beta.reshape(-1, 1).to(DTYPE)
    return torch.cat([beta, torch.sin(beta), torch.cos(beta)], dim=-1)


class ConcatSquashLinear(nn.Module):
    """out = (W_x·x + b_x) ⊙ sigmoid(W_g·ctx + b_g) + W_b·ctx."""

    def __init__(self, dim_in: int, dim_out: int, dim_ctx: int):
        super().__init__()
        self.layer = nn.Linear(dim_in, dim_out)
        self.hyper_gate = nn.Linear(dim_ctx, dim_out)
        self.hyper_bias = nn.Linear(dim_ctx, dim_out, bias=False)

    def forward(self, ctx: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.hyper_gate(ctx))
        return self.layer(x) * gate + self.hyper_bias(ctx)


class PointEncoder(nn.Module):
    def __init__(self, widths: Sequence[int], embedding_dim: int):
        super().__init__()
        dims = [3, *widths]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = nn.Linear(dims[-1], embedding_dim)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        # points: (B, N, 3)
        h = points
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = F.softplus(h)
        pooled = h.max(dim=1).values
        return self.head(pooled)


class PointwiseDenoiser(nn.Module):
    def __init__(self, widths: Sequence[int], dim_ctx: int, dim_in: int = 3):
        super().__init__()
        dims = [dim_in, *widths, 3]
        self.layers = nn.ModuleList(
            ConcatSquashLinear(a, b, dim_ctx) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, features: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        h = features
        for i, layer in enumerate(self.layers):
            h = layer(ctx, h)
            if i < len(self.layers) - 1:
                h = F.softplus(h)
        return h


class DiffusionModel(nn.Module):
    """Encoder + denoiser pair; the full set of learnable parameters."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        validate_widths(config)
        self.config = config
        self.encoder = PointEncoder(config.encoder_widths, config.embedding_dim)
        self.denoiser = PointwiseDenoiser(config.denoiser_widths, config.context_dim, config.point_in_dim)
        self.to(DTYPE)

    # ------------------------------------------------------------------ #
    # Forward pieces
    # ------------------------------------------------------------------ #
    def encode(self, points) -> torch.Tensor:
        """Shape embedding(s): (256,) for one cloud, (B, 256) for a batch."""
        x = _points_tensor(points)
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        if x.shape[1] < 1:
            raise ShapeMismatch("cannot encode an empty cloud")
        c = self.encoder(x)
        if not self.config.use_condition:
            c = torch.zeros_like(c)
        return c[0] if single else c

    def denoise(
        self,
        delta_t: torch.Tensor,
        c: torch.Tensor,
        beta_t,
        anchor: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Predicted noise for ``delta_t``; same shape as ``delta_t``.

        ``anchor`` is the conditioning cloud, required when the model was built
        with ``point_anchor``; it is permuted together with ``delta_t``.
        """
        delta = _points_tensor(delta_t)
        single = delta.dim() == 2
        if single:
            delta = delta.unsqueeze(0)
        c = c.to(DTYPE)
        if c.dim() == 1:
            c = c.unsqueeze(0)
        if c.shape != (delta.shape[0], self.config.embedding_dim):
            raise ShapeMismatch(
                f"embedding shape {tuple(c.shape)} does not match a batch of {delta.shape[0]}"
            )

        beta = torch.as_tensor(beta_t, dtype=DTYPE).reshape(-1)
        if beta.numel() == 1 and delta.shape[0] > 1:
            beta = beta.expand(delta.shape[0])
        if beta.shape[0] != delta.shape[0]:
            raise ShapeMismatch(f"{beta.shape[0]} betas for a batch of {delta.shape[0]}")

        features = delta
        if self.config.point_anchor:
            if anchor is None:
                raise ShapeMismatch("this model needs the conditioning cloud as anchor")
            a = _points_tensor(anchor)
            if a.dim() == 2:
                a = a.unsqueeze(0)
            if a.shape != delta.shape:
                raise ShapeMismatch(f"anchor {tuple(a.shape)} vs delta {tuple(delta.shape)}")
            features = torch.cat([delta, a], dim=-1)

        ctx = torch.cat([c, time_embedding(beta)], dim=-1).unsqueeze(1)
        out = delta + self.denoiser(features, ctx)
        return out[0] if single else out

    # ------------------------------------------------------------------ #
    def gradient_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters()]

    def zero_final_layer(self) -> None:
        """Make the denoiser an identity map on Δ_t (residual only)."""
        last = self.denoiser.layers[-1]
        with torch.no_grad():
            for p in last.parameters():
                p.zero_()


def _points_tensor(points) -> torch.Tensor:
    if isinstance(points, PointCloud):
        points = points.points
    if isinstance(points, torch.Tensor):
        x = points.to(DTYPE)
    else:
        x = torch.as_tensor(np.asarray(points, dtype=np.float64))
    if x.dim() not in (2, 3) or x.shape[-1] != 3:
        raise ShapeMismatch(f"expected (N, 3) or (B, N, 3) points, got {tuple(x.shape)}")
    return x


# ------------------------------------------------------------------ #
# Construction
# ------------------------------------------------------------------ #
def parameter_count(config: ModelConfig) -> int:
    validate_widths(config)
    enc_dims = [3, *config.encoder_widths]
    total = sum(a * b + b for a, b in zip(enc_dims[:-1], enc_dims[1:]))
    total += enc_dims[-1] * config.embedding_dim + config.embedding_dim

    ctx = config.context_dim
    den_dims = [config.point_in_dim, *config.denoiser_widths, 3]
    for a, b in zip(den_dims[:-1], den_dims[1:]):
        total += a * b + b  # point affine
        total += ctx * b + b  # gate
        total += ctx * b  # context bias
    return total


def init_params(seed: int, config: Optional[ModelConfig] = None) -> DiffusionModel:
    """Fresh model: weights ~ U(±1/sqrt(fan_in)), biases zero, deterministic per seed."""
    model = DiffusionModel(config or ModelConfig())
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / float(np.sqrt(module.in_features))
                module.weight.copy_(
                    torch.rand(module.weight.shape, generator=gen, dtype=DTYPE) * (2.0 * bound) - bound
                )
                if module.bias is not None:
                    module.bias.zero_()
    return model


# ------------------------------------------------------------------ #
# Loss / gradients
# ------------------------------------------------------------------ #
@dataclass(frozen=True, eq=False)
class TrainingTuple:
    """One supervised pair; ``t`` and ``eps`` are drawn from the seed when None."""

    anomalous: np.ndarray
    displacement: np.ndarray
    t: Optional[int] = None
    eps: Optional[np.ndarray] = None


def noise_prediction_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return torch.mean((eps_pred - eps) ** 2)


def tuple_seed(item: TrainingTuple, seed: int) -> int:
    """Seed for one tuple's (t, eps) draw, keyed by the batch seed and the tuple's content."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(item.anomalous, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(item.displacement, dtype=np.float64).tobytes())
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    return int(np.random.SeedSequence([int(seed), *map(int, words)]).generate_state(1)[0])


def draw_noise(
    batch: Sequence[TrainingTuple],
    sched: NoiseSchedule,
    seed: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-tuple steps (B,) and noise (B, N, 3); pre-drawn values are kept.

    Each tuple draws from its own generator, so identical tuples get
    identical (t, eps) wherever they sit in the batch.
    """
    steps, noises = [], []
    for item in batch:
        n = np.asarray(item.anomalous).shape[0]
        gen = torch.Generator().manual_seed(tuple_seed(item, seed))
        t = torch.randint(1, sched.t_max + 1, (1,), generator=gen).item()
        eps = torch.randn((n, 3), generator=gen, dtype=DTYPE)
        steps.append(int(item.t) if item.t is not None else int(t))
        noises.append(torch.as_tensor(np.asarray(item.eps, dtype=np.float64)) if item.eps is not None else eps)
    return torch.tensor(steps, dtype=torch.long), torch.stack(noises)


@dataclass
class BatchForward:
    loss: torch.Tensor
    steps: torch.Tensor
    eps: torch.Tensor
    eps_pred: torch.Tensor
    delta_t: torch.Tensor
    anomalous: torch.Tensor
    displacement: torch.Tensor


def forward_batch(
    batch: Sequence[TrainingTuple],
    model: DiffusionModel,
    sched: NoiseSchedule,
    seed: int,
) -> BatchForward:
    if not batch:
        raise EmptyBatch("loss needs at least one training tuple")
    sizes = {np.asarray(item.anomalous).shape for item in batch}
    if len(sizes) != 1:
        raise ShapeMismatch(f"all clouds in a batch must share one shape, got {sorted(sizes)}")
    for item in batch:
        if np.asarray(item.displacement).shape != np.asarray(item.anomalous).shape:
            raise ShapeMismatch("displacement must match its anomalous cloud")

    anomalous = torch.as_tensor(np.stack([np.asarray(b.anomalous, dtype=np.float64) for b in batch]))
    displacement = torch.as_tensor(np.stack([np.asarray(b.displacement, dtype=np.float64) for b in batch]))
    steps, eps = draw_noise(batch, sched, seed)
    if eps.shape != displacement.shape:
        raise ShapeMismatch(f"noise {tuple(eps.shape)} vs displacement {tuple(displacement.shape)}")

    delta_t = forward_sample(displacement, steps, eps, sched)
    c = model.encode(anomalous)
    betas = torch.as_tensor(sched.betas, dtype=DTYPE)[steps - 1]
    eps_pred = model.denoise(delta_t, c, betas, anomalous if model.config.point_anchor else None)
    return BatchForward(
        loss=noise_prediction_loss(eps_pred, eps),
        steps=steps,
        eps=eps,
        eps_pred=eps_pred,
        delta_t=delta_t,
        anomalous=anomalous,
        displacement=displacement,
    )


def loss_and_gradients(
    batch: Sequence[TrainingTuple],
    model: DiffusionModel,
    sched: NoiseSchedule,
    seed: int,
) -> Tuple[float, GradientSet]:
    """Mean noise-prediction loss over the batch and its exact gradients."""
    fwd = forward_batch(batch, model, sched, seed)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(fwd.loss, params)
    return float(fwd.loss.detach()), {name: g.detach() for name, g in zip(names, grads)}


# ------------------------------------------------------------------ #
# Checkpoints
# ------------------------------------------------------------------ #
CHECKPOINT_FORMAT = "pointmend-ckpt/1"


@dataclass(eq=False)
class Checkpoint:
    """Everything needed to resume training or run detection."""

    model: DiffusionModel
    schedule: NoiseSchedule
    train_config: TrainConfig
    iteration: int = 0
    optimizer: Optional[Dict[str, Any]] = None

    @property
    def num_points(self) -> int:
        return int(self.train_config.num_points)

    @property
    def config_digest(self) -> str:
        return self.train_config.digest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": json.loads(ckpt.model.config.json()),
        "params": {k: v.detach().clone() for k, v in ckpt.model.state_dict().items()},
        "schedule": ckpt.schedule.to_dict(),
        "train_config": ckpt.train_config.json(),
        "config_digest": ckpt.config_digest,
        "iteration": int(ckpt.iteration),
        "num_points": ckpt.num_points,
        "optimizer": ckpt.optimizer,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise CheckpointError(f"Could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"Could not read checkpoint {path}: {exc}") from exc

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointError(f"{path}: unsupported checkpoint format {found!r}")

    try:
        train_config = TrainConfig.parse_raw(payload["train_config"])
        if train_config.digest() != payload["config_digest"]:
            raise CheckpointError(f"{path}: training config digest mismatch")
        model = DiffusionModel(ModelConfig(**payload["model_config"]))
        model.load_state_dict(payload["params"])
        schedule = NoiseSchedule.from_dict(payload["schedule"])
    except CheckpointError:
        raise
    except (KeyError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc

    model.eval()
    return Checkpoint(
        model=model,
        schedule=schedule,
        train_config=train_config,
        iteration=int(payload.get("iteration", 0)),
        optimizer=payload.get("optimizer"),
    )
