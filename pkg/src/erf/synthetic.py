"""Analytic test scenes rendered by ray tracing into posed datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, build_pyramid
from .render import Camera, fov_to_focal, pixel_directions
from .scene import Aabb

SCENES = ("checkered_cube", "textured_slab", "sphere")
LIGHT_DIR = np.array([0.4, 0.55, 0.73]) / np.linalg.norm([0.4, 0.55, 0.73])
AMBIENT = 0.35
DIFFUSE = 0.65
CAMERA_ANGLE_X = 0.6911112
CAMERA_DISTANCE = 3.2
SUPERSAMPLE = 3

# two checker tones per face: +x, -x, +y, -y, +z, -z
FACE_COLORS = np.array([
    [[0.85, 0.20, 0.20], [0.95, 0.85, 0.80]],
    [[0.20, 0.65, 0.25], [0.85, 0.95, 0.80]],
    [[0.20, 0.30, 0.85], [0.80, 0.85, 0.95]],
    [[0.90, 0.75, 0.15], [0.30, 0.25, 0.20]],
    [[0.70, 0.25, 0.75], [0.95, 0.90, 0.95]],
    [[0.15, 0.70, 0.75], [0.20, 0.20, 0.25]],
])


def environment(dirs: np.ndarray) -> np.ndarray:
    """Smooth distant lighting seen in the background."""
    d = np.asarray(dirs, dtype=np.float64)
    up = 0.5 * (d[..., 2:3] + 1.0)
    sky = np.array([0.55, 0.70, 0.92])
    ground = np.array([0.48, 0.42, 0.36])
    tint = 0.06 * d[..., 0:1] * np.array([1.0, 0.5, -0.5])
    return np.clip(ground + (sky - ground) * up + tint, 0.0, 1.0)


@dataclass
class AnalyticScene:
    """Closed-form scene used both to render targets and as a test oracle."""

    kind: str
    half: np.ndarray          # box half extents (cube/slab) or radius (sphere)
    checks: int = 4

    @property
    def aabb(self) -> Aabb:
        return Aabb([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])

    def intersect(self, origins, dirs):
        """Hit distance (inf on miss), unit normal and albedo per ray."""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        if self.kind == "sphere":
            return self._sphere(o, d)
        return self._box(o, d)

    def _box(self, o, d):
        half = self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-half - o) / d
            t1 = (half - o) / d
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        t_in = lo.max(axis=1)
        t_out = hi.min(axis=1)
        hit = (t_out >= t_in) & (t_in > 0)
        axis = lo.argmax(axis=1)
        t = np.where(hit, t_in, np.inf)
        p = o + d * np.where(hit, t_in, 0.0)[:, None]
        sign = np.where(np.take_along_axis(d, axis[:, None], 1)[:, 0] < 0, 1.0, -1.0)
        normal = np.zeros_like(o)
        normal[np.arange(o.shape[0]), axis] = sign
        face = 2 * axis + (sign < 0)
        u_axis = (axis + 1) % 3
        v_axis = (axis + 2) % 3
        rows = np.arange(o.shape[0])
        pu = (p[rows, u_axis] + half[u_axis]) / (2 * half[u_axis])
        pv = (p[rows, v_axis] + half[v_axis]) / (2 * half[v_axis])
        if self.kind == "textured_slab":
            tone = (np.floor(pu * 2 * self.checks) % 2).astype(int)
        else:
            tone = ((np.floor(pu * self.checks) + np.floor(pv * self.checks)) % 2).astype(int)
        tone = np.clip(tone, 0, 1)
        albedo = FACE_COLORS[face, tone]
        return t, normal, albedo

    def _sphere(self, o, d):
        r = float(self.half[0])
        b = np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - r * r
        disc = b * b - c
        hit = disc >= 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        hit &= t > 0
        t = np.where(hit, t, np.inf)
        p = o + d * np.where(hit, t, 0.0)[:, None]
        normal = p / r
        lat = np.arcsin(np.clip(normal[:, 2], -1, 1))
        band = (np.floor((lat / math.pi + 0.5) * 2 * self.checks) % 2).astype(int)
        albedo = FACE_COLORS[4, band]
        return t, normal, albedo

    def shade(self, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
        """Colour and hit distance per ray (environment where nothing is hit)."""
        t, normal, albedo = self.intersect(origins, dirs)
        lambert = np.maximum(normal @ LIGHT_DIR, 0.0)
        color = albedo * (AMBIENT + DIFFUSE * lambert)[:, None]
        miss = ~np.isfinite(t)
        color[miss] = environment(np.asarray(dirs).reshape(-1, 3)[miss])
        return np.clip(color, 0.0, 1.0), t


def make_scene(kind: str) -> AnalyticScene:
    if kind == "checkered_cube":
        return AnalyticScene(kind, np.full(3, 0.5), checks=4)
    if kind == "textured_slab":
        return AnalyticScene(kind, np.array([0.6, 0.6, 0.12]), checks=3)
    if kind == "sphere":
        return AnalyticScene(kind, np.array([0.55, 0.55, 0.55]), checks=4)
    raise ValueError(f"unknown synthetic scene {kind!r}; choose from {SCENES}")


def fibonacci_directions(n: int, seed: int, max_elevation: float = 1.2) -> np.ndarray:
    """Quasi-uniform viewing directions with a seeded azimuth offset."""
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0.0, 2.0 * math.pi)
    k = np.arange(n) + 0.5
    z = np.sin(max_elevation) * (1.0 - 2.0 * k / n)
    phi = offset + math.pi * (3.0 - math.sqrt(5.0)) * np.arange(n)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def orbit_cameras(n: int, res: int, seed: int, distance: float = CAMERA_DISTANCE,
                  angle_x: float = CAMERA_ANGLE_X) -> list[Camera]:
    fx = fov_to_focal(res, angle_x)
    return [Camera.look_at(distance * d, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], fx, res, res)
            for d in fibonacci_directions(n, seed)]


def render_analytic(scene: AnalyticScene, camera: Camera, supersample: int = SUPERSAMPLE):
    """Box-filtered colour image and centre-ray hit distance image."""
    w, h = camera.width, camera.height
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    acc = np.zeros((h * w, 3))
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for dv in offsets:
        for du in offsets:
            o, d = pixel_directions(camera, 0, uu.ravel() + du, vv.ravel() + dv)
            acc += scene.shade(o, d)[0]
    o, d = pixel_directions(camera, 0, uu.ravel(), vv.ravel())
    _, t = scene.shade(o, d)
    return (acc / supersample ** 2).reshape(h, w, 3), t.reshape(h, w)


def make_synthetic_scene(kind: str, n_train: int = 20, n_test: int = 5, res: int = 64,
                         seed: int = 0) -> tuple[Dataset, AnalyticScene]:
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if n_test < 0 or res < 1:
        raise ValueError("n_test must be >= 0 and res >= 1")
    scene = make_scene(kind)
    cams = orbit_cameras(n_train, res, seed)
    cams += orbit_cameras(n_test, res, seed + 7919) if n_test else []
    pyramids = []
    for cam in cams:
        img, _ = render_analytic(scene, cam)
        pyramids.append(build_pyramid(img.astype(np.float32)))
    split = ["train"] * n_train + ["test"] * n_test
    return Dataset(cams, pyramids, split), scene
