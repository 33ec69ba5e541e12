"""Coarse-to-fine reconstruction: optimisation phases separated by structure updates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .data import Dataset
from .hierarchy import structure_phase
from .metrics import psnr, ssim
from .optimize import Trainer, train_epoch
from .render import render_view
from .scene import Aabb, SceneModel, create_dense_grid, init_random
from .serialize import save_model

log = logging.getLogger(__name__)


def initial_model(aabb: Aabb, config: Config, seed: int = 0) -> SceneModel:
    """Dense grid at ``init_depth`` with random fog initialisation."""
    model = create_dense_grid(aabb, config.init_depth, config.sh_bands,
                              config.cube_resolution, config.node_budget)
    return init_random(model, seed, config.renderer, config.samples_per_side)


@dataclass
class FitResult:
    model: SceneModel
    trainer: Trainer
    phases: int
    done: bool
    history: list = field(default_factory=list)


def fit(model: SceneModel, dataset: Dataset, config: Config, seed: int = 0,
        iterations: int | None = None, log_file=None, checkpoint_dir: str | Path | None = None,
        max_phases: int | None = None, callback=None) -> FitResult:
    """Alternate ``phase_iterations`` optimisation steps with merge/subdivide
    until subdivision adds nothing or ``max_phases`` is reached.

    ``iterations`` caps the total number of optimisation steps. ``callback``
    is called as ``callback(phase, trainer, event)`` after each optimisation
    phase (event "optimized") and each structure update (event "structure").
    """
    cfg = config
    phases = cfg.max_phases if max_phases is None else max_phases
    trainer = Trainer(model, dataset, cfg, seed=seed, log_file=log_file)
    budget = iterations
    done = False
    history = []
    phase = 0
    for phase in range(1, phases + 1):
        steps = cfg.phase_iterations if budget is None else min(cfg.phase_iterations, budget)
        if steps <= 0:
            break
        start = time.perf_counter()
        train_epoch(trainer.model, trainer.opt, trainer, cfg, steps)
        if budget is not None:
            budget -= steps
        if callback is not None:
            callback(phase, trainer, "optimized")
        before = trainer.model.svo.n_nodes
        _, _, done = structure_phase(trainer.model, trainer, dataset, cfg)
        record = {"phase": phase, "iteration": trainer.iteration, "nodes_before": before,
                  "nodes_after": trainer.model.svo.n_nodes, "done": bool(done),
                  "seconds": time.perf_counter() - start}
        history.append(record)
        trainer.emit(record)
        log.info("phase %d: %d -> %d nodes%s", phase, before, trainer.model.svo.n_nodes,
                 " (final)" if done else "")
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            save_model(trainer.model, path / f"phase_{phase:02d}.erf")
        if callback is not None:
            callback(phase, trainer, "structure")
        if done:
            break
    return FitResult(trainer.model, trainer, phase, bool(done), history)


def evaluate(model: SceneModel, dataset: Dataset, config: Config, views=None,
             seed: int = 0) -> dict:
    """Mean PSNR and SSIM over the given views (default: the test split)."""
    views = dataset.test if views is None else list(views)
    scores = []
    for i in views:
        out = render_view(model, dataset.cameras[i], 0, config.samples_per_side,
                          config.renderer, config.sensor, seed=seed,
                          max_samples=config.render_max_samples)
        gt = dataset.pyramids[i][0]
        scores.append((psnr(out.color, gt), ssim(out.color, gt)))
    arr = np.asarray(scores, dtype=np.float64).reshape(-1, 2)
    return {"views": len(views), "psnr": float(arr[:, 0].mean()) if len(views) else float("nan"),
            "ssim": float(arr[:, 1].mean()) if len(views) else float("nan"),
            "per_view": arr.tolist()}
