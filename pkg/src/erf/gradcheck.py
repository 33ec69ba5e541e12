"""Finite-difference check of the full objective on a small random problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .data import Dataset
from .grad import (FDReport, ForwardTape, LossSettings, finite_difference_check, forward,
                   make_prior_batch)
from .optimize import CameraTable
from .render import slab_interval
from .sampling import PixelBatch, sample_batch
from .scene import Aabb, SceneModel, create_dense_grid, init_random


@dataclass
class GradProblem:
    model: SceneModel
    tape: ForwardTape


def oracle_problem(dataset: Dataset | None = None, aabb: Aabb | None = None, seed: int = 0,
                   depth: int = 2, n_rays: int = 16, n_samples: int = 32,
                   prior_batch: int = 64, config: Config | None = None) -> GradProblem:
    """Random float64 model of the given depth and a recorded forward pass over
    ``n_rays`` training pixels with up to ``n_samples`` samples each."""
    cfg = config or Config()
    if dataset is None:
        from .synthetic import make_synthetic_scene

        dataset, scene = make_synthetic_scene("checkered_cube", 4, 0, 16, seed)
        aabb = aabb or scene.aabb
    if aabb is None:
        aabb = Aabb([-1.5] * 3, [1.5] * 3)
    rng = np.random.default_rng(seed)
    model = create_dense_grid(aabb, depth, cfg.sh_bands, cfg.cube_resolution,
                              dtype=np.float64)
    init_random(model, seed, cfg.renderer, cfg.samples_per_side)
    train = np.asarray(dataset.train)
    image = rng.choice(train, size=n_rays)
    level = np.zeros(n_rays, dtype=np.int64)
    u = np.array([rng.integers(0, dataset.cameras[i].width) for i in image])
    v = np.array([rng.integers(0, dataset.cameras[i].height) for i in image])
    rgb = np.stack([dataset.pyramids[i][0][y, x] for i, x, y in zip(image, u, v)])
    batch = PixelBatch(image, level, u, v, rgb.astype(np.float64), np.zeros(n_rays, dtype=np.int64))
    origins, dirs, slope = CameraTable.build(dataset).rays(batch)
    t_near, t_far, hit = slab_interval(origins, dirs, model.aabb.min, model.aabb.max)
    samples = sample_batch(model.svo, origins, dirs, t_near, t_far, slope, hit,
                           cfg.samples_per_side, cfg.max_samples, n_samples,
                           cfg.sample_weight_floor, cfg.renderer, seed, 0)
    prior = make_prior_batch(model, prior_batch, rng)
    settings = LossSettings(cfg.renderer, cfg.sensor, cfg.prior_strength, cfg.huber_delta)
    tape = forward(model, origins, dirs, samples.count, samples.t, samples.footprint,
                   samples.step, batch.rgb, prior, settings)
    return GradProblem(model, tape)


def run_gradient_check(problem: GradProblem, h: float = 1e-5, tolerance: float = 1e-4,
                       abs_tolerance: float = 1e-9, max_params: int | None = None,
                       seed: int = 0) -> FDReport:
    return finite_difference_check(problem.model, problem.tape, h, tolerance, abs_tolerance,
                                   max_params=max_params, rng=np.random.default_rng(seed))
