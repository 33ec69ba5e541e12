"""Objective, sparse Adam and the inner optimisation loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .config import Config
from .data import Dataset
from .grad import (GradientSet, LossSettings, PriorBatch, backward, forward,
                   make_prior_batch, accumulate_priors)
from .metrics import psnr
from .render import render_view, slab_interval
from .sampling import LossCache, PixelBatch, sample_batch, sample_pixels, update_cache
from .scene import SceneModel


class NumericalError(RuntimeError):
    """Objective or parameters became non-finite."""


@dataclass
class OptState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n_params: int, lr: float = 5e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "OptState":
        return cls(0, np.zeros(n_params), np.zeros(n_params), lr, beta1, beta2, eps)


def reset_optimizer(opt: OptState, new_param_count: int) -> OptState:
    """Fresh moments and step counter; hyperparameters carry over."""
    return OptState.create(new_param_count, opt.lr, opt.beta1, opt.beta2, opt.eps)


def adam_step(model: SceneModel, opt: OptState, grads: GradientSet,
              lr: float | None = None) -> tuple[SceneModel, OptState]:
    """Bias-corrected Adam on the entries with a nonzero gradient only."""
    opt.step += 1
    if grads.node_ids.size == 0 and grads.texel_ids.size == 0:
        return model, opt
    lr = opt.lr if lr is None else lr
    svo = model.svo
    p = svo.row_size
    n_node = svo.n_nodes * p
    hyper = (float(lr), opt.beta1, opt.beta2, opt.eps, opt.step)
    if grads.node_ids.size:
        _kernels.adam_rows(svo.params, opt.m[:n_node].reshape(-1, p),
                           opt.v[:n_node].reshape(-1, p), grads.node_ids,
                           np.ascontiguousarray(grads.node_grads, dtype=np.float64), *hyper)
    if grads.texel_ids.size:
        off = model.texel_offset
        _kernels.adam_rows(model.params[off:].reshape(-1, 3), opt.m[off:].reshape(-1, 3),
                           opt.v[off:].reshape(-1, 3), grads.texel_ids,
                           np.ascontiguousarray(grads.texel_grads, dtype=np.float64), *hyper)
    model.touch()
    return model, opt


def photo_loss(predicted, target) -> float:
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sum(diff * diff, axis=-1).sum()) if diff.ndim > 1 else float(diff @ diff)


def huber(x, delta: float = 0.1):
    """Quadratic within +-delta, linear outside, C1 at the joins."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def prior_losses(model: SceneModel, batch: PriorBatch, lam: float = 1e-3,
                 delta: float = 0.1) -> float:
    """Smoothness, level-of-detail and zero priors, normalised by batch size."""
    settings = LossSettings(prior_strength=lam, huber_delta=delta)
    svo = model.svo
    return accumulate_priors(model, batch, settings, np.zeros((0, svo.row_size)),
                             np.zeros(0, dtype=np.bool_), np.zeros((0, 3)),
                             np.zeros(0, dtype=np.bool_), False)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class CameraTable:
    """Per-image camera parameters as arrays for batched ray generation."""

    rot: np.ndarray
    center: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset) -> "CameraTable":
        cams = dataset.cameras
        return cls(np.stack([c.pose[:3, :3] for c in cams]),
                   np.stack([c.pose[:3, 3] for c in cams]),
                   np.array([c.fx for c in cams]), np.array([c.fy for c in cams]),
                   np.array([c.cx for c in cams]), np.array([c.cy for c in cams]))

    def rays(self, batch: PixelBatch):
        i = batch.image
        scale = 2.0 ** batch.level
        x = (batch.u + 0.5 - self.cx[i] / scale) * scale / self.fx[i]
        y = (batch.v + 0.5 - self.cy[i] / scale) * scale / self.fy[i]
        local = np.stack([x, y, np.ones_like(x)], axis=1)
        local /= np.linalg.norm(local, axis=1, keepdims=True)
        dirs = np.einsum("nij,nj->ni", self.rot[i], local)
        slope = scale * np.maximum(1.0 / self.fx[i], 1.0 / self.fy[i])
        return self.center[i].copy(), dirs, slope


def eligible_levels(dataset: Dataset, images, root_side: float, center) -> np.ndarray:
    """Highest pyramid level per image whose footprint near the scene fits the root."""
    out = []
    for i in images:
        cam = dataset.cameras[i]
        dist = max(float(np.linalg.norm(cam.center - center)), 1e-9)
        top = len(dataset.pyramids[i]) - 1
        level = 0
        while level < top and dist * cam.pixel_slope(level + 1) <= root_side:
            level += 1
        out.append(level)
    return np.asarray(out, dtype=np.int64)


@dataclass
class Trainer:
    """Mutable training context shared by successive optimisation phases."""

    model: SceneModel
    dataset: Dataset
    config: Config
    seed: int = 0
    iteration: int = 0
    opt: OptState | None = None
    cache: LossCache | None = None
    stats: list = field(default_factory=list)
    log_file: object = None
    probe_view: int | None = None

    def __post_init__(self):
        cfg = self.config
        self.rng = np.random.default_rng(self.seed)
        self.cameras = CameraTable.build(self.dataset)
        if self.opt is None:
            self.opt = OptState.create(self.model.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if self.cache is None:
            svo = self.model.svo
            levels = eligible_levels(self.dataset, self.dataset.train, svo.root_side,
                                     svo.root_min + 0.5 * svo.root_side)
            self.cache = LossCache(self.dataset, cache_mip=cfg.cache_mip, decay=cfg.cache_decay,
                                   rebuild_every=cfg.cache_rebuild,
                                   floor=cfg.pixel_weight_floor, max_levels=levels,
                                   frozen=not cfg.importance_sampling)
        self.settings = LossSettings(cfg.renderer, cfg.sensor, cfg.prior_strength,
                                     cfg.huber_delta)
        self.phase_start = self.iteration

    def reset_optimizer(self):
        self.opt = reset_optimizer(self.opt, self.model.n_params)
        self.phase_start = self.iteration

    def learning_rate(self) -> float:
        cfg = self.config
        progress = (self.iteration - self.phase_start) / max(cfg.phase_iterations, 1)
        return cfg.lr * cfg.lr_decay ** min(progress, 1.0)

    def step(self) -> dict:
        cfg = self.config
        model = self.model
        batch = sample_pixels(self.cache, self.dataset, cfg.pixel_batch, self.rng)
        origins, dirs, slope = self.cameras.rays(batch)
        t_near, t_far, hit = slab_interval(origins, dirs, model.aabb.min, model.aabb.max)
        samples = sample_batch(model.svo, origins, dirs, t_near, t_far, slope, hit,
                               cfg.samples_per_side, cfg.max_samples, cfg.max_samples_opacity,
                               cfg.sample_weight_floor, cfg.renderer, self.seed, self.iteration)
        prior = make_prior_batch(model, cfg.prior_batch, self.rng)
        tape = forward(model, origins, dirs, samples.count, samples.t, samples.footprint,
                       samples.step, batch.rgb, prior, self.settings)
        if not math.isfinite(tape.loss):
            raise NumericalError(f"non-finite objective at iteration {self.iteration}")
        grads = backward(model, tape)
        adam_step(model, self.opt, grads, self.learning_rate())
        err = (tape.pixel - tape.targets) ** 2
        update_cache(self.cache, batch, err)
        self.iteration += 1
        return {"photo": tape.photo, "prior": tape.prior_loss}

    def probe_psnr(self) -> float:
        view = self.probe_view
        if view is None:
            test = self.dataset.test
            view = test[0] if test else self.dataset.train[0]
        out = render_view(self.model, self.dataset.cameras[view], 0,
                          self.config.samples_per_side, self.config.renderer,
                          self.config.sensor, seed=self.seed,
                          max_samples=self.config.render_max_samples)
        return psnr(out.color, self.dataset.pyramids[view][0])

    def emit(self, record: dict):
        self.stats.append(record)
        if self.log_file is not None:
            self.log_file.write(json.dumps(record) + "\n")
            self.log_file.flush()


def train_epoch(model: SceneModel, opt: OptState, data: Dataset | Trainer, config: Config,
                iterations: int, seed: int = 0) -> tuple[SceneModel, OptState, list]:
    """Run ``iterations`` optimisation steps; returns the model, optimiser and stats.

    ``data`` may be a ``Trainer`` to continue an existing run (keeps the loss
    cache, random stream and iteration counter).
    """
    if isinstance(data, Trainer):
        trainer = data
        trainer.model = model
        trainer.opt = opt
    else:
        trainer = Trainer(model, data, config, seed=seed, opt=opt)
    cfg = trainer.config
    window = []
    start = time.perf_counter()
    stats = []
    for _ in range(iterations):
        rec = trainer.step()
        window.append(rec["photo"])
        if cfg.log_every and trainer.iteration % cfg.log_every == 0:
            record = {
                "iteration": trainer.iteration,
                "photo_loss": float(np.mean(window)),
                "prior_loss": rec["prior"],
                "nodes": trainer.model.svo.n_nodes,
                "probe_psnr": trainer.probe_psnr(),
                "seconds": time.perf_counter() - start,
            }
            window = []
            stats.append(record)
            trainer.emit(record)
    return trainer.model, trainer.opt, stats
