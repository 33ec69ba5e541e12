"""Error-driven pixel sampling and LoD-aware ray sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import Dataset
from .scene import MODE_CODES, Svo

WEIGHT_FLOOR = 0.05
INITIAL_LOSS = 1.0


def _seed_from(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2 ** 63 - 1))


@dataclass
class PixelBatch:
    image: np.ndarray   # (B,) image index
    level: np.ndarray   # (B,) pyramid level
    u: np.ndarray       # (B,) column at that level
    v: np.ndarray       # (B,) row at that level
    rgb: np.ndarray     # (B, 3) ground truth
    cell: np.ndarray    # (B,) loss-cache cell that produced the draw

    def __len__(self) -> int:
        return int(self.image.shape[0])


class LossCache:
    """Running per-cell photo losses over coarse pyramid levels of the training images.

    Cells are the pixels of pyramid level ``cache_mip``. Sampling reads the
    prefix sums built at the last rebuild; the losses themselves update every
    iteration.
    """

    def __init__(self, dataset: Dataset, images=None, cache_mip: int = 2,
                 decay: float = 0.9, rebuild_every: int = 5000,
                 floor: float = WEIGHT_FLOOR, max_levels=None, frozen: bool = False):
        self.images = np.asarray(dataset.train if images is None else images, dtype=np.int64)
        if self.images.size == 0:
            raise ValueError("loss cache needs at least one image")
        self.cache_mip = int(cache_mip)
        self.decay = float(decay)
        self.rebuild_every = int(rebuild_every)
        self.floor = float(floor)
        self.frozen = frozen
        self.updates = 0
        shapes, offsets, total = [], [], 0
        self.level_count = []
        for k, img in enumerate(self.images):
            pyr = dataset.pyramids[img]
            lvl = min(self.cache_mip, len(pyr) - 1)
            h, w = pyr[lvl].shape[:2]
            shapes.append((h, w, lvl))
            offsets.append(total)
            total += h * w
            n_levels = len(pyr)
            if max_levels is not None:
                n_levels = min(n_levels, int(max_levels[k]) + 1)
            self.level_count.append(n_levels)
        self.shapes = np.asarray(shapes, dtype=np.int64)
        self.offsets = np.asarray(offsets + [total], dtype=np.int64)
        self.level_count = np.asarray(self.level_count, dtype=np.int64)
        self.cell_image = np.repeat(np.arange(self.images.size), np.diff(self.offsets))
        self.losses = np.full(total, INITIAL_LOSS)
        self.rebuild()

    @property
    def n_cells(self) -> int:
        return int(self.losses.size)

    @property
    def weights(self) -> np.ndarray:
        return self.losses + self.floor

    def rebuild(self):
        self.prefix = np.cumsum(self.weights)

    def draw_cells(self, count: int, rng: np.random.Generator) -> np.ndarray:
        total = self.prefix[-1] if self.prefix.size else 0.0
        if not total > 0.0:
            return rng.integers(0, self.n_cells, size=count)
        x = rng.uniform(0.0, total, size=count)
        return np.minimum(np.searchsorted(self.prefix, x, side="right"), self.n_cells - 1)


def sample_pixels(cache: LossCache, dataset: Dataset, count: int,
                  rng: np.random.Generator) -> PixelBatch:
    """Draw pixels proportionally to cached loss, then a random pyramid level."""
    empty = np.zeros(0, dtype=np.int64)
    if count <= 0:
        return PixelBatch(empty, empty, empty, empty, np.zeros((0, 3)), empty)
    cells = cache.draw_cells(count, rng)
    slot = cache.cell_image[cells]
    image = cache.images[slot]
    local = cells - cache.offsets[slot]
    cw, clvl = cache.shapes[slot, 1], cache.shapes[slot, 2]
    cv, cu = local // cw, local % cw
    level = np.floor(rng.uniform(0.0, 1.0, size=count) * cache.level_count[slot]).astype(np.int64)
    level = np.minimum(level, cache.level_count[slot] - 1)
    finer = level <= clvl
    span = np.left_shift(1, np.maximum(clvl - level, 0))
    ju = np.floor(rng.uniform(0.0, 1.0, size=count) * span).astype(np.int64)
    jv = np.floor(rng.uniform(0.0, 1.0, size=count) * span).astype(np.int64)
    shift = np.maximum(level - clvl, 0)
    u = np.where(finer, cu * span + ju, cu >> shift)
    v = np.where(finer, cv * span + jv, cv >> shift)
    table = dataset.pixel_table()
    h, w = table.height[image, level], table.width[image, level]
    u = np.minimum(u, w - 1)
    v = np.minimum(v, h - 1)
    rgb = table.pixels[table.offset[image, level] + v * w + u].astype(np.float64)
    return PixelBatch(image, level, u, v, rgb, cells)


def update_cache(cache: LossCache, batch: PixelBatch, losses: np.ndarray) -> LossCache:
    """Blend new per-pixel losses (max over colour channels) into their cells."""
    if cache.frozen or len(batch) == 0:
        return cache
    per_pixel = np.asarray(losses, dtype=np.float64)
    if per_pixel.ndim == 2:
        per_pixel = per_pixel.max(axis=1)
    cells = batch.cell
    cache.losses[cells] = cache.decay * cache.losses[cells] + (1.0 - cache.decay) * per_pixel
    cache.updates += 1
    if cache.rebuild_every > 0 and cache.updates % cache.rebuild_every == 0:
        cache.rebuild()
    return cache


# ---------------------------------------------------------------------------
# ray sampling

@dataclass
class SampleList:
    t: np.ndarray
    footprint: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def take(self, keep: np.ndarray) -> "SampleList":
        return SampleList(self.t[keep], self.footprint[keep], self.step[keep])


def stratified_ray_samples(svo: Svo, origin, direction, t_near: float, t_far: float,
                           footprint_slope: float, n_per_side: int = 8,
                           rng=0) -> SampleList:
    """All stratified samples along a ray, in increasing depth."""
    seed = _seed_from(rng)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    cap = 1024
    while True:
        ts, ss, dts = np.empty(cap), np.empty(cap), np.empty(cap)
        state = _kernels.rng_seed(seed, 0, 0)
        n = _kernels.traverse_ray(svo.children, svo.lut, svo.root_min, svo.root_side, svo.max_depth,
                                  o, d, float(t_near), float(t_far), float(footprint_slope),
                                  float(n_per_side), state, cap, False, ts, ss, dts)
        if n <= cap:
            return SampleList(ts[:n], ss[:n], dts[:n])
        cap = 2 * n


def cap_uniform(samples: SampleList, n_max: int = 256, rng=0) -> SampleList:
    """Uniform random subset of at most ``n_max`` samples, order preserved."""
    if len(samples) <= n_max:
        return samples
    state = _kernels.rng_seed(_seed_from(rng), 1, 0)
    return samples.take(_kernels.uniform_subset(len(samples), int(n_max), state))


def cap_by_opacity(samples: SampleList, opacity, n_max_o: int = 32,
                   rng=0, floor: float = WEIGHT_FLOOR) -> SampleList:
    """Opacity-weighted subset without replacement, order preserved."""
    if len(samples) <= n_max_o:
        return samples
    weights = floor + np.asarray(opacity, dtype=np.float64)
    state = _kernels.rng_seed(_seed_from(rng), 2, 0)
    return samples.take(_kernels.weighted_subset(weights, int(n_max_o), state))


@dataclass
class BatchSamples:
    """Per-ray filtered samples for a batch, padded to ``n_max_o`` columns."""

    t: np.ndarray        # (R, S)
    footprint: np.ndarray
    step: np.ndarray
    count: np.ndarray    # (R,)


def sample_batch(svo: Svo, origins, dirs, t_near, t_far, slopes, valid,
                 n_per_side: int, n_max: int, n_max_o: int, floor: float,
                 renderer: str, seed: int, stream: int) -> BatchSamples:
    """Stratified sampling, uniform cap and opacity-weighted cap for many rays."""
    r = np.asarray(origins).shape[0]
    out = BatchSamples(np.zeros((r, n_max_o)), np.zeros((r, n_max_o)),
                       np.zeros((r, n_max_o)), np.zeros(r, dtype=np.int64))
    _kernels.sample_rays(svo.children, svo.lut, svo.params, svo.border, svo.root_min, svo.root_side,
                         svo.max_depth, np.ascontiguousarray(origins, dtype=np.float64),
                         np.ascontiguousarray(dirs, dtype=np.float64),
                         np.ascontiguousarray(t_near, dtype=np.float64),
                         np.ascontiguousarray(t_far, dtype=np.float64),
                         np.ascontiguousarray(slopes, dtype=np.float64),
                         np.ascontiguousarray(valid, dtype=np.bool_), float(n_per_side),
                         int(n_max), int(n_max_o), float(floor), MODE_CODES[renderer],
                         int(seed), int(stream), out.t, out.footprint, out.step, out.count)
    return out
