"""Posed image datasets, image pyramids and PNG helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import GL_TO_CV, Camera, fov_to_focal

ROTATION_TOL = 1e-4


class DataError(Exception):
    """Malformed or missing dataset content."""


def build_pyramid(image: np.ndarray, gaussian: bool = False) -> list[np.ndarray]:
    """Mipmap pyramid down to 1x1 by repeated 2x2 box averaging.

    Odd dimensions are handled by edge replication so the next level has
    ``ceil(n / 2)`` pixels.
    """
    img = np.asarray(image, dtype=np.float32)
    levels = [img]
    while img.shape[0] > 1 or img.shape[1] > 1:
        src = img
        if gaussian:
            src = _blur5(src)
        h, w = src.shape[:2]
        if h % 2:
            src = np.concatenate([src, src[-1:]], axis=0)
        if w % 2:
            src = np.concatenate([src, src[:, -1:]], axis=1)
        img = 0.25 * (src[0::2, 0::2] + src[1::2, 0::2] + src[0::2, 1::2] + src[1::2, 1::2])
        img = img.astype(np.float32)
        levels.append(img)
    return levels


def _blur5(img: np.ndarray) -> np.ndarray:
    from scipy.ndimage import convolve1d

    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    out = convolve1d(img, k, axis=0, mode="nearest")
    return convolve1d(out, k, axis=1, mode="nearest").astype(np.float32)


@dataclass
class Dataset:
    cameras: list[Camera]
    pyramids: list[list[np.ndarray]]
    split: list[str]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.cameras) == len(self.pyramids) == len(self.split)):
            raise DataError("cameras, images and split labels differ in length")
        if not self.names:
            self.names = [f"{s}_{i:03d}" for i, s in enumerate(self.split)]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]

    @property
    def train(self) -> list[int]:
        return self.indices("train")

    @property
    def test(self) -> list[int]:
        return self.indices("test")

    def image(self, index: int, level: int = 0) -> np.ndarray:
        return self.pyramids[index][level]

    def pixel_table(self) -> "PixelTable":
        """All pyramid pixels in one flat array (built once, then cached)."""
        table = getattr(self, "_table", None)
        if table is None:
            table = PixelTable.build(self.pyramids)
            self._table = table
        return table


@dataclass
class PixelTable:
    pixels: np.ndarray    # (total, 3)
    offset: np.ndarray    # (n_images, n_levels) start of each level
    width: np.ndarray
    height: np.ndarray

    @classmethod
    def build(cls, pyramids) -> "PixelTable":
        n_levels = max(len(p) for p in pyramids)
        shape = (len(pyramids), n_levels)
        offset = np.zeros(shape, dtype=np.int64)
        width = np.ones(shape, dtype=np.int64)
        height = np.ones(shape, dtype=np.int64)
        chunks, total = [], 0
        for i, pyr in enumerate(pyramids):
            for k, img in enumerate(pyr):
                offset[i, k] = total
                height[i, k], width[i, k] = img.shape[:2]
                chunks.append(img.reshape(-1, 3))
                total += img.shape[0] * img.shape[1]
        return cls(np.concatenate(chunks), offset, width, height)


def composite_alpha(rgba: np.ndarray, white_background: bool) -> np.ndarray:
    rgb = rgba[..., :3]
    if rgba.shape[-1] < 4:
        return rgb
    a = rgba[..., 3:4]
    bg = 1.0 if white_background else 0.0
    return rgb * a + bg * (1.0 - a)


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA" if im.mode in ("RGBA", "LA", "P") else "RGB"))
    return arr.astype(np.float32) / 255.0


def write_png(path: Path | str, rgb: np.ndarray) -> None:
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def _load_split(root: Path, split: str, white_background: bool):
    path = root / f"transforms_{split}.json"
    if not path.exists():
        return None
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise DataError(f"{path}: missing camera_angle_x or frames")
    cameras, images, names = [], [], []
    for k, frame in enumerate(meta["frames"]):
        try:
            c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: frame {k} has no valid transform_matrix") from exc
        if c2w.shape != (4, 4):
            raise DataError(f"{path}: frame {k} transform is {c2w.shape}, expected 4x4")
        rot = c2w[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > ROTATION_TOL or np.linalg.det(rot) < 0:
            raise DataError(f"{path}: frame {k} rotation is not rigid")
        file = frame.get("file_path", "")
        img_path = root / file
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DataError(f"{path}: missing image {img_path}")
        rgb = composite_alpha(read_png(img_path), white_background)
        h, w = rgb.shape[:2]
        fx = fov_to_focal(w, float(meta["camera_angle_x"]))
        cameras.append(Camera(c2w @ GL_TO_CV, fx, fx, w / 2.0, h / 2.0, w, h))
        images.append(rgb)
        names.append(Path(file).stem or f"{split}_{k:03d}")
    return cameras, images, names


def load_nerf_synthetic(directory: str | Path, white_background: bool = True,
                        gaussian_pyramid: bool = False) -> Dataset:
    """Load the transforms_{train,test}.json layout (OpenGL camera poses)."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    cameras, pyramids, split, names = [], [], [], []
    for part in ("train", "test"):
        loaded = _load_split(root, part, white_background)
        if loaded is None:
            continue
        cams, imgs, nms = loaded
        cameras += cams
        pyramids += [build_pyramid(im, gaussian_pyramid) for im in imgs]
        split += [part] * len(cams)
        names += nms
    if not cameras:
        raise DataError(f"{root}: no transforms_train.json / transforms_test.json")
    if "train" not in split:
        raise DataError(f"{root}: no training views")
    return Dataset(cameras, pyramids, split, names)


def save_nerf_synthetic(dataset: Dataset, directory: str | Path,
                        extra: dict | None = None) -> None:
    """Write a dataset in the same layout ``load_nerf_synthetic`` reads."""
    root = Path(directory)
    for part in ("train", "test"):
        (root / part).mkdir(parents=True, exist_ok=True)
        frames = []
        angle = None
        for i in dataset.indices(part):
            cam = dataset.cameras[i]
            angle = 2.0 * np.arctan(0.5 * cam.width / cam.fx)
            name = f"{part}/r_{len(frames):03d}"
            write_png(root / f"{name}.png", dataset.pyramids[i][0])
            frames.append({"file_path": f"./{name}",
                           "transform_matrix": (cam.pose @ GL_TO_CV).tolist()})
        meta = {"camera_angle_x": float(angle) if angle is not None else 0.6911112,
                "frames": frames}
        if extra:
            meta.update(extra)
        (root / f"transforms_{part}.json").write_text(json.dumps(meta, indent=2))


def scene_bounds(directory: str | Path):
    """Optional ``aabb`` entry stored next to the transforms (min, max)."""
    path = Path(directory) / "transforms_train.json"
    meta = json.loads(path.read_text())
    box = meta.get("aabb")
    if box is None:
        return None
    return np.asarray(box[0], dtype=np.float64), np.asarray(box[1], dtype=np.float64)
