"""Explicit scene edits on node sets selected by an axis-aligned box."""

from __future__ import annotations

import numpy as np

from .scene import Aabb, SceneModel


def nodes_in_box(model: SceneModel, box: Aabb) -> np.ndarray:
    """Indices of all nodes (every level) whose centre lies inside ``box``."""
    return np.nonzero(box.contains(model.svo.centers()))[0]


def edit_recolor(model: SceneModel, box: Aabb, channel_map) -> SceneModel:
    """Remap RGB radiance channels of the selected nodes by a 3x3 matrix.

    The matrix acts on the channel axis of every SH coefficient, in the plane
    value and in all three plane gradients, so the output radiance is
    ``channel_map @ rgb`` before the radiance constraint.
    """
    mix = np.asarray(channel_map, dtype=np.float64)
    if mix.shape != (3, 3):
        raise ValueError("channel_map must be a 3x3 matrix")
    out = model.copy()
    svo = out.svo
    nodes = nodes_in_box(out, box)
    if nodes.size == 0:
        return out
    c = svo.channels
    nb2 = svo.sh_bands ** 2
    for part in range(4):
        cols = slice(4 + part * c, 4 + (part + 1) * c)
        coef = svo.params[nodes, cols].astype(np.float64).reshape(-1, 3, nb2)
        svo.params[nodes, cols] = np.einsum("ij,njk->nik", mix, coef).reshape(-1, c)
    out.touch()
    return out


def edit_cut(model: SceneModel, box: Aabb) -> SceneModel:
    """Turn the selected nodes into free space: their opacity planes take the
    border value. Structure and radiance are unchanged."""
    out = model.copy()
    svo = out.svo
    nodes = nodes_in_box(out, box)
    if nodes.size:
        svo.params[nodes, 0:4] = svo.border[0:4]
        out.touch()
    return out
