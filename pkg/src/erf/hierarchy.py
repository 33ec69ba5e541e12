"""Structure adaptation between optimisation phases: required-node detection,
free-space merging and footprint-gated subdivision."""

from __future__ import annotations

import logging

import numpy as np

from . import _kernels
from .render import Camera
from .scene import MODE_CODES, SceneModel, Svo, coord_keys

log = logging.getLogger(__name__)

NEIGHBOR_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1)
                             for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)], dtype=np.int64)


def probe_opacity(svo: Svo, nodes=None, mode: str = "opacity", per_axis: int = 8,
                  n_per_side: int = 8) -> np.ndarray:
    """Max constrained opacity of each node's own-level field on a cell-centred grid."""
    nodes = np.arange(svo.n_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    return _kernels.max_probe_opacity(svo.children, svo.lut, svo.params, svo.border,
                                      svo.root_min, svo.root_side, svo.depth, svo.coords,
                                      nodes, int(per_axis), MODE_CODES[mode],
                                      float(n_per_side))


def _neighbor_lookup(keys_sorted: np.ndarray, order: np.ndarray, coords: np.ndarray,
                     n: int) -> np.ndarray:
    """(len(coords), 26) member indices of the 26 neighbours, -1 where absent."""
    nb = coords[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]
    inside = np.all((nb >= 0) & (nb < n), axis=2)
    keys = coord_keys(np.clip(nb, 0, n - 1))
    pos = np.minimum(np.searchsorted(keys_sorted, keys), keys_sorted.shape[0] - 1)
    found = inside & (keys_sorted[pos] == keys)
    return np.where(found, order[pos], -1)


def hysteresis_select(coords: np.ndarray, values: np.ndarray, n: int,
                      high: float = 0.75, low: float = 0.075) -> np.ndarray:
    """Breadth-first hysteresis over the 27-neighbourhood graph of one level,
    followed by a one-ring dilation. Returns a boolean mask over ``coords``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    values = np.asarray(values, dtype=np.float64)
    m = coords.shape[0]
    visited = values >= high
    if m == 0 or not visited.any():
        return np.zeros(m, dtype=np.bool_)
    keys = coord_keys(coords)
    order = np.argsort(keys)
    keys_sorted = keys[order]
    neighbors = _neighbor_lookup(keys_sorted, order, coords, n)
    expandable = values >= low
    frontier = np.nonzero(visited)[0]
    while frontier.size:
        cand = neighbors[frontier].ravel()
        cand = np.unique(cand[cand >= 0])
        cand = cand[~visited[cand] & expandable[cand]]
        visited[cand] = True
        frontier = cand
    out = visited.copy()
    ring = neighbors[visited].ravel()
    out[ring[ring >= 0]] = True
    return out


def required_nodes(svo: Svo, mode: str = "opacity", high: float = 0.75,
                   low: float = 0.075, per_axis: int = 8,
                   n_per_side: int = 8) -> np.ndarray:
    """Boolean mask of nodes near confident surfaces, found level by level."""
    required = np.zeros(svo.n_nodes, dtype=np.bool_)
    peak = probe_opacity(svo, None, mode, per_axis, n_per_side)
    for d in range(svo.max_depth + 1):
        members = np.nonzero(svo.depth == d)[0]
        mask = hysteresis_select(svo.coords[members], peak[members], 1 << d, high, low)
        required[members[mask]] = True
    return required


def _rebuild(svo: Svo, rows: np.ndarray, depth: np.ndarray, coords: np.ndarray,
             params: np.ndarray) -> tuple[Svo, np.ndarray]:
    new = Svo(svo.root_min, svo.root_side, svo.sh_bands, depth, coords, params, svo.border)
    return new, rows[new.source_index]


def merge(svo: Svo, required) -> Svo:
    """Drop every sibling group with no required member and no surviving children."""
    return merge_with_mapping(svo, required)[0]


def merge_with_mapping(svo: Svo, required) -> tuple[Svo, np.ndarray]:
    """``merge`` plus, for every surviving node, its index in the input tree."""
    req = np.asarray(required, dtype=np.bool_)
    keep = np.ones(svo.n_nodes, dtype=np.bool_)
    has_kids = svo.children >= 0
    for d in range(svo.max_depth, 0, -1):
        parents = np.nonzero((svo.depth == d - 1) & has_kids)[0]
        first = svo.children[parents]
        group = first[:, None] + np.arange(8)[None, :]
        alive = req[group] | (has_kids[group])
        drop = ~alive.any(axis=1)
        keep[group[drop].ravel()] = False
        has_kids[parents[drop]] = False
    rows = np.nonzero(keep)[0]
    return _rebuild(svo, rows, svo.depth[rows], svo.coords[rows], svo.params[rows])


def camera_footprint_gate(svo: Svo, nodes: np.ndarray, cameras: list[Camera]) -> np.ndarray:
    """Smallest back-projected mip-0 pixel footprint at each node centre over
    the cameras that see it (inf where no camera does)."""
    centers = svo.centers(nodes)
    best = np.full(centers.shape[0], np.inf)
    for cam in cameras:
        rot = cam.pose[:3, :3]
        local = (centers - cam.center) @ rot
        z = local[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = cam.fx * local[:, 0] / zs + cam.cx
        v = cam.fy * local[:, 1] / zs + cam.cy
        seen = front & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
        dist = np.linalg.norm(centers - cam.center, axis=1)
        fp = dist * cam.pixel_slope(0)
        best = np.where(seen, np.minimum(best, fp), best)
    return best


def subdivide(svo: Svo, required, cameras: list[Camera],
              node_budget: int = 2 ** 24, mode: str = "opacity",
              per_axis: int = 8, n_per_side: int = 8) -> tuple[Svo, bool]:
    """Split required leaves whose children stay above the finest camera footprint.

    Children take the parent level's interpolated field: value and analytic
    gradient at each child centre, for both opacity and radiance.
    """
    req = np.asarray(required, dtype=np.bool_)
    leaves = np.nonzero(req & (svo.children < 0))[0]
    if leaves.size == 0:
        return svo, False
    child_side = svo.root_side / 2.0 ** (svo.depth[leaves] + 1)
    footprint = camera_footprint_gate(svo, leaves, cameras)
    leaves = leaves[child_side >= footprint]
    if leaves.size == 0:
        return svo, False
    room = (int(node_budget) - svo.n_nodes) // 8
    if room < leaves.size:
        peak = probe_opacity(svo, leaves, mode, per_axis, n_per_side)
        leaves = leaves[np.argsort(-peak, kind="stable")[:max(room, 0)]]
        log.warning("node budget %d reached: subdividing %d of the candidate leaves",
                    node_budget, leaves.size)
        if leaves.size == 0:
            return svo, False
    octant = np.array([(i & 1, (i >> 1) & 1, (i >> 2) & 1) for i in range(8)], dtype=np.int64)
    new_depth, new_coords, new_params = [], [], []
    ncol = svo.channels
    for d in np.unique(svo.depth[leaves]):
        group = leaves[svo.depth[leaves] == d]
        coords = (2 * svo.coords[group])[:, None, :] + octant[None, :, :]
        coords = coords.reshape(-1, 3)
        ell = svo.root_side / 2.0 ** (d + 1)
        centers = svo.root_min + (coords + 0.5) * ell
        vals, grads = _kernels.level_field_and_grad(svo.children, svo.lut, svo.params,
                                                    svo.border, svo.root_min, svo.root_side,
                                                    int(d), centers, ncol)
        rows = np.zeros((coords.shape[0], svo.row_size))
        rows[:, 0] = vals[:, 0]
        rows[:, 1:4] = grads[:, :, 0]
        rows[:, 4:4 + ncol] = vals[:, 1:]
        for a in range(3):
            rows[:, 4 + (a + 1) * ncol:4 + (a + 2) * ncol] = grads[:, a, 1:]
        new_depth.append(np.full(coords.shape[0], d + 1))
        new_coords.append(coords)
        new_params.append(rows.astype(svo.params.dtype))
    depth = np.concatenate([svo.depth] + new_depth)
    coords = np.concatenate([svo.coords] + new_coords)
    params = np.concatenate([svo.params] + new_params)
    new = Svo(svo.root_min, svo.root_side, svo.sh_bands, depth, coords, params, svo.border)
    return new, True


def structure_phase(model: SceneModel, opt, data, config):
    """Merge free space, then subdivide near surfaces.

    ``data`` is the training dataset (its training cameras gate subdivision).
    Returns ``(model, opt, done)``; the optimiser is reset whenever the tree
    gained nodes, and ``done`` is true when nothing was subdivided.
    """
    from .optimize import OptState, reset_optimizer

    cfg = config
    svo = model.svo
    required = required_nodes(svo, cfg.renderer, cfg.hysteresis_high, cfg.hysteresis_low,
                              cfg.probe_per_axis, cfg.samples_per_side)
    merged, source = merge_with_mapping(svo, required)
    # leaves whose children were just merged away are not split again, or a
    # dilation-ring node would be refined and pruned in alternate phases
    required = required[source] & ~((svo.children[source] >= 0) & (merged.children < 0))
    cameras = [data.cameras[i] for i in data.train]
    refined, changed = subdivide(merged, required, cameras, cfg.node_budget, cfg.renderer,
                                 cfg.probe_per_axis, cfg.samples_per_side)
    if changed or merged.n_nodes != svo.n_nodes:
        model.replace_svo(refined)
        if isinstance(opt, OptState):
            opt = reset_optimizer(opt, model.n_params)
        elif opt is not None:
            opt.reset_optimizer()
    return model, opt, not changed
