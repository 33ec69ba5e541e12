"""Explicit radiance fields: sparse voxel octree opacity and SH surface light
fields reconstructed from posed images."""

from .config import Config, load_config
from .data import Dataset, DataError, build_pyramid, load_nerf_synthetic
from .edit import edit_cut, edit_recolor
from .field import eval_normal, eval_opacity, eval_radiance, interp4d, query, select_depths
from .hierarchy import merge, required_nodes, structure_phase, subdivide
from .metrics import psnr, ssim
from .optimize import OptState, adam_step, photo_loss, prior_losses, train_epoch
from .pipeline import evaluate, fit, initial_model
from .render import Camera, render_image, render_view
from .scene import Aabb, CubeMap, SceneModel, Svo, create_dense_grid, init_random
from .serialize import load_model, save_model
from .synthetic import make_synthetic_scene

__all__ = [
    "Aabb", "Camera", "Config", "CubeMap", "DataError", "Dataset", "OptState", "SceneModel",
    "Svo", "adam_step", "build_pyramid", "create_dense_grid", "edit_cut", "edit_recolor",
    "eval_normal", "eval_opacity", "eval_radiance", "evaluate", "fit", "init_random",
    "initial_model", "interp4d", "load_config", "load_model", "load_nerf_synthetic",
    "make_synthetic_scene", "merge", "photo_loss", "prior_losses", "psnr", "query",
    "render_image", "render_view", "required_nodes", "save_model", "select_depths", "ssim",
    "structure_phase", "subdivide", "train_epoch",
]
