"""Cameras, rays, compositing, sensor response and image rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .constraints import lilu_forward
from .scene import MODE_CODES, Aabb, CubeMap, SceneModel

SENSOR_CODES = {"identity": _kernels.SENSOR_IDENTITY, "gamma": _kernels.SENSOR_GAMMA}
RENDER_MODES = ("color", "depth", "normal", "opacity")
DEPTH_EPS = 1e-10

# OpenGL (NeRF) camera axes -> OpenCV axes (+x right, +y down, +z forward)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass
class Camera:
    """Pinhole camera; ``pose`` is a 4x4 camera-to-world matrix with +z forward."""

    pose: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def look_at(cls, eye, target, up, fx, width, height, fy=None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = down
        pose[:3, 2] = forward
        pose[:3, 3] = eye
        fy = fx if fy is None else fy
        return cls(pose, fx, fy, width / 2.0, height / 2.0, width, height)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    def level_size(self, mip_level: int) -> tuple[int, int]:
        w, h = self.width, self.height
        for _ in range(mip_level):
            w, h = (w + 1) // 2, (h + 1) // 2
        return w, h

    def pixel_slope(self, mip_level: int = 0) -> float:
        """Footprint growth per unit ray distance."""
        return (2.0 ** mip_level) * max(1.0 / self.fx, 1.0 / self.fy)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (level 0) and camera-space depth of world points."""
        rot = self.pose[:3, :3]
        local = (np.asarray(points) - self.center) @ rot
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * local[..., 0] / z + self.cx
            v = self.fy * local[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    pixel: tuple[int, int, int, int]   # (image id, mip level, u, v)
    t_near: float
    t_far: float


@dataclass
class RaySampleSet:
    depths: np.ndarray          # (n,)
    footprints: np.ndarray      # (n,)
    opacity: np.ndarray         # (n,)
    radiance: np.ndarray        # (n, 3)

    @property
    def transparencies(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - self.opacity)])


def slab_interval(origins, dirs, box_min, box_max):
    """Ray/box entry and exit distances (entry clamped to 0) and hit mask."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box_min - o) * inv
        t1 = (box_max - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # parallel rays: inside the slab -> unbounded, outside -> miss
    parallel = d == 0.0
    inside = (o >= box_min) & (o <= box_max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far, t_far > t_near


def pixel_directions(camera: Camera, mip_level: int, u, v) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions through pixel centres."""
    scale = 2.0 ** mip_level
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - camera.cx / scale) / (camera.fx / scale)
    y = (v + 0.5 - camera.cy / scale) / (camera.fy / scale)
    local = np.stack([x, y, np.ones_like(x)], axis=-1)
    local /= np.linalg.norm(local, axis=-1, keepdims=True)
    dirs = local @ camera.pose[:3, :3].T
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def cast_rays(camera: Camera, mip_level: int, u, v, aabb: Aabb):
    """Vectorised ray casting: origins, dirs, t_near, t_far, hit mask."""
    origins, dirs = pixel_directions(camera, mip_level, u, v)
    t_near, t_far, hit = slab_interval(origins, dirs, aabb.min, aabb.max)
    return origins, dirs, t_near, t_far, hit


def cast_ray(camera: Camera, mip_level: int, u: int, v: int, aabb: Aabb,
             image_id: int = 0) -> Ray | None:
    o, d, t0, t1, hit = cast_rays(camera, mip_level, np.array([u]), np.array([v]), aabb)
    if not hit[0]:
        return None
    return Ray(o[0], d[0], (image_id, mip_level, int(u), int(v)), float(t0[0]), float(t1[0]))


def footprint(camera: Camera, mip_level: int, t) -> np.ndarray | float:
    return np.asarray(t, dtype=np.float64) * camera.pixel_slope(mip_level)


def composite_opacity(samples: RaySampleSet, background) -> tuple[np.ndarray, float, float]:
    """Front-to-back opacity compositing over a background colour."""
    trans = samples.transparencies
    weights = trans[:-1] - trans[1:]
    rgb = weights @ np.asarray(samples.radiance, dtype=np.float64).reshape(-1, 3) \
        + trans[-1] * np.asarray(background, dtype=np.float64)
    alpha = 1.0 - trans[-1]
    depth = float(weights @ np.asarray(samples.depths, dtype=np.float64)) / max(alpha, DEPTH_EPS)
    return rgb, float(alpha), depth


def compositing_weights(opacity: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-sample weights T_i * o_i and the residual transparency."""
    o = np.asarray(opacity, dtype=np.float64)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - o)])
    return trans[:-1] * o, float(trans[-1])


def composite_exponential(densities, radiances, background, step_sizes) -> np.ndarray:
    """Exponential-transmittance compositing of per-sample densities."""
    tau = np.asarray(densities, dtype=np.float64) * np.asarray(step_sizes, dtype=np.float64)
    before = np.concatenate([[0.0], np.cumsum(tau)])
    trans = np.exp(-before)
    weights = trans[:-1] * -np.expm1(-tau)
    rgb = weights @ np.asarray(radiances, dtype=np.float64).reshape(-1, 3)
    return rgb + trans[-1] * np.asarray(background, dtype=np.float64)


def sensor_response(radiance, mode: str = "identity") -> np.ndarray:
    y = np.clip(np.asarray(radiance, dtype=np.float64), 0.0, 1.0)
    if mode == "gamma":
        return y ** (1.0 / 2.2)
    if mode != "identity":
        raise ValueError(f"unknown sensor mode {mode!r}")
    return y


def background_lookup(background: CubeMap, direction) -> np.ndarray:
    """Bilinear cube-map lookup (clamped at face edges), then LiLU."""
    d = np.asarray(direction, dtype=np.float64).reshape(-1, 3)
    flat = background.texels.reshape(-1, 3).astype(np.float64)
    idx = np.empty(4, dtype=np.int64)
    w = np.empty(4)
    out = np.empty((d.shape[0], 3))
    for i, (x, y, z) in enumerate(d):
        _kernels.cube_texels(background.resolution, x, y, z, idx, w)
        out[i] = w @ flat[idx]
    out = lilu_forward(out)
    return out.reshape(np.shape(direction)[:-1] + (3,))


def texel_direction(resolution: int, face: int, row: int, col: int) -> np.ndarray:
    """Unit direction through the centre of one cube-map texel."""
    s = 2.0 * (col + 0.5) / resolution - 1.0
    t = 2.0 * (row + 0.5) / resolution - 1.0
    v = {
        0: (1.0, -t, -s),
        1: (-1.0, -t, s),
        2: (s, 1.0, t),
        3: (s, -1.0, -t),
        4: (s, -t, 1.0),
        5: (-s, -t, -1.0),
    }[face]
    v = np.asarray(v)
    return v / np.linalg.norm(v)


@dataclass
class RenderOutput:
    color: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    overflow_rays: int


def render_rays(model: SceneModel, origins, dirs, t_near, t_far, hit, slope,
                samples_per_side: int = 8, renderer: str = "opacity",
                sensor: str = "identity", seed: int = 0, stream: int = 0,
                max_samples: int = 4096):
    """Render arbitrary rays without sample filtering.

    Returns colour, opacity, expected depth and normal per ray plus the number
    of rays that exceeded ``max_samples``.
    """
    svo = model.svo
    n = np.asarray(origins).shape[0]
    rgb = np.empty((n, 3))
    alpha = np.empty(n)
    depth = np.empty(n)
    normal = np.empty((n, 3))
    slope = np.broadcast_to(np.asarray(slope, dtype=np.float64), (n,))
    overflow = _kernels.render_rays(
        svo.children, svo.lut, svo.params, svo.border, model.background.texels,
        svo.root_min, svo.root_side, svo.max_depth, svo.sh_bands,
        MODE_CODES[renderer], SENSOR_CODES[sensor],
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t_near, dtype=np.float64),
        np.ascontiguousarray(t_far, dtype=np.float64),
        np.ascontiguousarray(slope), np.ascontiguousarray(hit, dtype=np.bool_),
        float(samples_per_side), int(seed), int(stream), int(max_samples),
        rgb, alpha, depth, normal)
    return RenderOutput(rgb, alpha, depth, normal, int(overflow))


def render_view(model: SceneModel, camera: Camera, mip_level: int = 0,
                samples_per_side: int = 8, renderer: str = "opacity",
                sensor: str = "identity", seed: int = 0,
                max_samples: int = 4096) -> RenderOutput:
    """Render every pixel of a camera at a pyramid level; arrays are (H, W, ...)."""
    w, h = camera.level_size(mip_level)
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    o, d, t0, t1, hit = cast_rays(camera, mip_level, uu.ravel(), vv.ravel(), model.aabb)
    out = render_rays(model, o, d, t0, t1, hit, camera.pixel_slope(mip_level),
                      samples_per_side, renderer, sensor, seed, 0, max_samples)
    return RenderOutput(out.color.reshape(h, w, 3), out.opacity.reshape(h, w),
                        out.depth.reshape(h, w), out.normal.reshape(h, w, 3),
                        out.overflow_rays)


def render_image(model: SceneModel, camera: Camera, mip_level: int = 0,
                 mode: str = "color", **kwargs) -> np.ndarray:
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    out = render_view(model, camera, mip_level, **kwargs)
    return getattr(out, "color" if mode == "color" else mode)


def camera_at_level(camera: Camera, mip_level: int) -> Camera:
    s = 2.0 ** mip_level
    w, h = camera.level_size(mip_level)
    return Camera(camera.pose, camera.fx / s, camera.fy / s, camera.cx / s,
                  camera.cy / s, w, h)


def fov_to_focal(width: int, angle: float) -> float:
    return 0.5 * width / math.tan(0.5 * angle)
