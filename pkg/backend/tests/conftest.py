"""Shared fixtures: seeded clouds and a tiny model / checkpoint."""

import pytest

from core.config import ModelConfig, PatchGenConfig, ScheduleConfig, TrainConfig
from core.diffusion import linear_schedule
from core.geom import PointCloud, normalize_cloud
from core.model import Checkpoint, init_params
from tests.helpers import unit_sphere

SMALL_MODEL = ModelConfig(encoder_widths=[16, 32], denoiser_widths=[16, 16])


@pytest.fixture
def sphere_cloud():
    """Normalised 256-point sphere."""
    cloud, _ = normalize_cloud(PointCloud(unit_sphere(256, seed=3)))
    return cloud


@pytest.fixture
def small_model_config():
    return SMALL_MODEL.copy()


@pytest.fixture
def small_train_config():
    return TrainConfig(
        batch_size=2,
        iterations=2,
        num_points=64,
        log_every=1,
        patchgen=PatchGenConfig(),
        schedule=ScheduleConfig(t_max=10),
        model=SMALL_MODEL.copy(),
    )


@pytest.fixture
def normal_pool():
    return [PointCloud(unit_sphere(96, seed=s)) for s in range(3)]


@pytest.fixture
def small_checkpoint(small_train_config):
    cfg = small_train_config
    sched = linear_schedule(cfg.schedule.t_max, cfg.schedule.beta_start, cfg.schedule.beta_end)
    return Checkpoint(model=init_params(5, cfg.model).eval(), schedule=sched, train_config=cfg)
