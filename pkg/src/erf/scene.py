"""Explicit scene representation: sparse voxel octree, background cube map, AABB.

Nodes live in flat arrays in breadth-first order. Every node owns one row of
``Svo.params`` laid out as::

    [opacity f0, opacity grad(3), sh f0(C), sh grad_x(C), sh grad_y(C), sh grad_z(C)]

where ``C = 3 * sh_bands**2`` (channel-major coefficients). The eight
children of a node occupy consecutive rows starting at ``children[node]``
in octant order ``x | y << 1 | z << 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DEFAULT_NODE_BUDGET = 2 ** 24
DEFAULT_CUBE_RESOLUTION = 16

BORDER_OPACITY_RAW = {
    "opacity": -0.5,
    "exp-softplus": -10.0,
    "exp-lilu": -0.5,
}
OPACITY_MODES = tuple(BORDER_OPACITY_RAW)
MODE_CODES = {
    "opacity": _kernels.MODE_OPACITY,
    "exp-softplus": _kernels.MODE_EXP_SOFTPLUS,
    "exp-lilu": _kernels.MODE_EXP_LILU,
}

INIT_MAX_OPACITY = 0.05


def sh_channels(sh_bands: int) -> int:
    return 3 * sh_bands * sh_bands


def row_size(sh_bands: int) -> int:
    return 4 + 4 * sh_channels(sh_bands)


def full_tree_nodes(depth: int) -> int:
    return (8 ** (depth + 1) - 1) // 7


@dataclass
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.min)) and np.all(np.isfinite(self.max))):
            raise ValueError("AABB corners must be finite")
        if not np.all(self.min < self.max):
            raise ValueError(f"degenerate AABB {self.min} .. {self.max}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)

    def root_cube(self) -> tuple[np.ndarray, float]:
        """Smallest enclosing cube centred on the box: (min corner, side)."""
        side = float(np.max(self.size))
        return self.center - 0.5 * side, side


@dataclass
class PlaneSample:
    """Raw field value at a node centre plus its spatial gradient (3 x D)."""

    f0: np.ndarray
    grad: np.ndarray

    def __call__(self, offset: np.ndarray) -> np.ndarray:
        return self.f0 + np.asarray(offset) @ self.grad


@dataclass
class SvoNode:
    """Read-only view of one allocated node."""

    index: int
    center: np.ndarray
    depth: int
    side: float
    children: tuple[int, ...] | None
    opacity_plane: PlaneSample
    sh_plane: PlaneSample


def _split_row(row: np.ndarray, channels: int) -> tuple[PlaneSample, PlaneSample]:
    row = np.asarray(row, dtype=np.float64)
    opacity = PlaneSample(row[0:1].copy(), row[1:4].reshape(3, 1).copy())
    sh = PlaneSample(row[4:4 + channels].copy(),
                     row[4 + channels:4 + 4 * channels].reshape(3, channels).copy())
    return opacity, sh


def pack_row(opacity: PlaneSample, sh: PlaneSample) -> np.ndarray:
    return np.concatenate([np.ravel(opacity.f0), np.ravel(opacity.grad),
                           np.ravel(sh.f0), np.ravel(sh.grad)])


def coord_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return (c[..., 0] << 42) | (c[..., 1] << 21) | c[..., 2]


class Svo:
    """Sparse voxel octree over a cubic root with per-node plane samples."""

    def __init__(self, root_min, root_side: float, sh_bands: int,
                 depth: np.ndarray, coords: np.ndarray, params: np.ndarray,
                 border: np.ndarray | None = None):
        self.root_min = np.asarray(root_min, dtype=np.float64).reshape(3)
        self.root_side = float(root_side)
        self.sh_bands = int(sh_bands)
        depth = np.asarray(depth, dtype=np.int64)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        params = np.asarray(params)
        if params.shape != (depth.shape[0], row_size(sh_bands)):
            raise ValueError(f"params shape {params.shape} does not match "
                             f"{depth.shape[0]} nodes with {sh_bands} bands")
        order, children = _bfs_layout(depth, coords)
        self.depth = depth[order]
        self.coords = coords[order]
        self.params = params[order]
        self.children = children
        self.source_index = order  # input row of each stored node
        self.lut = _kernels.build_lut(children, self.depth, self.coords,
                                      min(int(self.depth.max()), _kernels.LUT_MAX_DEPTH))
        if border is None:
            border = np.zeros(row_size(sh_bands), dtype=params.dtype)
            border[0] = BORDER_OPACITY_RAW["opacity"]
        self.border = np.asarray(border, dtype=params.dtype).copy()

    # -- sizes ---------------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return int(self.depth.shape[0])

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    @property
    def channels(self) -> int:
        return sh_channels(self.sh_bands)

    @property
    def row_size(self) -> int:
        return row_size(self.sh_bands)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.children < 0

    @property
    def parents(self) -> np.ndarray:
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        inner = np.nonzero(self.children >= 0)[0]
        for k in range(8):
            parent[self.children[inner] + k] = inner
        return parent

    def side(self, depth) -> np.ndarray | float:
        return self.root_side / (2.0 ** np.asarray(depth))

    def centers(self, nodes=None) -> np.ndarray:
        idx = slice(None) if nodes is None else nodes
        d = self.depth[idx]
        ell = self.root_side / (2.0 ** d)
        return self.root_min + (self.coords[idx] + 0.5) * ell[..., None]

    # -- accessors -----------------------------------------------------------
    @property
    def border_plane_opacity(self) -> PlaneSample:
        return _split_row(self.border, self.channels)[0]

    @property
    def border_plane_sh(self) -> PlaneSample:
        return _split_row(self.border, self.channels)[1]

    @property
    def root(self) -> SvoNode:
        return self.node(0)

    def node(self, index: int) -> SvoNode:
        index = int(index)
        first = int(self.children[index])
        opacity, sh = _split_row(self.params[index], self.channels)
        d = int(self.depth[index])
        return SvoNode(
            index=index,
            center=self.centers([index])[0],
            depth=d,
            side=float(self.side(d)),
            children=None if first < 0 else tuple(range(first, first + 8)),
            opacity_plane=opacity,
            sh_plane=sh,
        )

    def find(self, depth: int, coords) -> int:
        """Index of the node at ``depth`` with integer cell coords, or -1."""
        node, reached = _kernels.descend(self.children, self.lut, int(depth), *map(int, coords))
        return int(node) if reached == depth else -1


def _bfs_layout(depth: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Breadth-first order with contiguous sibling groups, plus first-child links."""
    roots = np.nonzero(depth == 0)[0]
    if roots.shape[0] != 1 or np.any(coords[roots[0]] != 0):
        raise ValueError("octree must contain exactly one root at coords (0,0,0)")
    levels = [roots]
    for d in range(1, int(depth.max()) + 1):
        members = np.nonzero(depth == d)[0]
        parent_keys = coord_keys(coords[levels[-1]])
        mine = coord_keys(coords[members] >> 1)
        sorter = np.argsort(parent_keys)
        pos = np.minimum(np.searchsorted(parent_keys[sorter], mine), parent_keys.shape[0] - 1)
        if np.any(parent_keys[sorter][pos] != mine):
            raise ValueError(f"level {d} contains nodes without a parent")
        parent_rank = sorter[pos]
        octant = (coords[members, 0] & 1) | ((coords[members, 1] & 1) << 1) \
            | ((coords[members, 2] & 1) << 2)
        order = np.lexsort((octant, parent_rank))
        groups = parent_rank[order]
        if (members.shape[0] % 8 or np.any(groups.reshape(-1, 8) != groups[::8, None])
                or np.any(octant[order].reshape(-1, 8) != np.arange(8))):
            raise ValueError(f"level {d} has an incomplete sibling group")
        levels.append(members[order])
    children = np.full(depth.shape[0], -1, dtype=np.int64)
    base = 0
    for d in range(len(levels) - 1):
        parent_keys = coord_keys(coords[levels[d]])
        rank = np.argsort(parent_keys)
        group_keys = coord_keys(coords[levels[d + 1][::8]] >> 1)
        owner = rank[np.searchsorted(parent_keys[rank], group_keys)]
        child_base = base + levels[d].shape[0]
        children[base + owner] = child_base + 8 * np.arange(group_keys.shape[0])
        base = child_base
    return np.concatenate(levels), children


@dataclass
class CubeMap:
    resolution: int
    texels: np.ndarray = field(repr=False)

    @classmethod
    def zeros(cls, resolution: int, dtype=np.float32) -> "CubeMap":
        return cls(int(resolution), np.zeros((6, resolution, resolution, 3), dtype=dtype))


class SceneModel:
    """Complete optimizable state.

    All optimizable scalars (node rows, then cube-map texels) share one flat
    buffer so the optimizer can address them by index. ``svo.params`` and
    ``background.texels`` are views into it. ``version`` increments whenever
    parameters or structure change.
    """

    def __init__(self, svo: Svo, background: CubeMap, aabb: Aabb):
        self.svo = svo
        self.background = background
        self.aabb = aabb
        self.version = 0
        self._pack()

    def _pack(self):
        dtype = self.svo.params.dtype
        n_node = self.svo.params.size
        buf = np.empty(n_node + self.background.texels.size, dtype=dtype)
        buf[:n_node] = self.svo.params.ravel()
        buf[n_node:] = self.background.texels.ravel()
        self.params = buf
        self.svo.params = buf[:n_node].reshape(self.svo.n_nodes, self.svo.row_size)
        r = self.background.resolution
        self.background.texels = buf[n_node:].reshape(6, r, r, 3)

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    @property
    def texel_offset(self) -> int:
        return int(self.svo.params.size)

    def touch(self):
        self.version += 1

    def replace_svo(self, svo: Svo):
        """Install a structurally changed octree (keeps the background)."""
        self.svo = svo
        self._pack()
        self.touch()

    def astype(self, dtype) -> "SceneModel":
        svo = self.svo
        new = Svo(svo.root_min, svo.root_side, svo.sh_bands, svo.depth, svo.coords,
                  svo.params.astype(dtype), svo.border.astype(dtype))
        bg = CubeMap(self.background.resolution, self.background.texels.astype(dtype))
        return SceneModel(new, bg, Aabb(self.aabb.min, self.aabb.max))

    def copy(self) -> "SceneModel":
        return self.astype(self.dtype)


def create_dense_grid(aabb: Aabb, depth: int, sh_bands: int = 3,
                      cube_resolution: int = DEFAULT_CUBE_RESOLUTION,
                      node_budget: int = DEFAULT_NODE_BUDGET,
                      dtype=np.float32) -> SceneModel:
    """Full octree of the given depth with zeroed planes and background."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not 1 <= sh_bands <= 4:
        raise ValueError("sh_bands must be in 1..4")
    total = full_tree_nodes(depth)
    if total > node_budget:
        raise ValueError(f"dense grid of depth {depth} needs {total} nodes, "
                         f"budget is {node_budget}")
    depths = []
    coords = []
    for d in range(depth + 1):
        n = 1 << d
        g = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                                 indexing="ij"), axis=-1).reshape(-1, 3)
        coords.append(g)
        depths.append(np.full(g.shape[0], d))
    root_min, side = aabb.root_cube()
    params = np.zeros((total, row_size(sh_bands)), dtype=dtype)
    svo = Svo(root_min, side, sh_bands, np.concatenate(depths),
              np.concatenate(coords), params)
    return SceneModel(svo, CubeMap.zeros(cube_resolution, dtype), aabb)


def init_opacity_bound(mode: str, depth: int, root_side: float = 1.0,
                       n_per_side: int = 8,
                       max_opacity: float = INIT_MAX_OPACITY) -> float:
    """Largest raw opacity keeping a main-diagonal ray below ``max_opacity``.

    Opacity mode counts the stratified samples a diagonal ray draws at the
    finest level (plus one per cell for partial strata). Exponential modes
    bound the density integral over the diagonal instead.
    """
    if mode == "opacity":
        cells = 2 ** depth
        k = math.ceil(n_per_side * math.sqrt(3.0) * cells) + cells
        per_sample = 1.0 - (1.0 - max_opacity) ** (1.0 / k)
        return (math.atanh(2.0 * per_sample - 1.0) + 2.0) / 4.0
    rho = -math.log1p(-max_opacity) / (math.sqrt(3.0) * root_side)
    if mode == "exp-softplus":
        return math.log(math.expm1(rho))
    if mode == "exp-lilu":
        return rho
    raise ValueError(f"unknown opacity mode {mode!r}")


def init_random(model: SceneModel, seed: int, mode: str = "opacity",
                n_per_side: int = 8) -> SceneModel:
    """Random fog initialisation, in place (the model is also returned)."""
    svo = model.svo
    rng = np.random.default_rng(seed)
    floor = BORDER_OPACITY_RAW[mode]
    bound = max(init_opacity_bound(mode, svo.max_depth, svo.root_side, n_per_side), floor)
    c = svo.channels
    nb2 = svo.sh_bands ** 2
    n = svo.n_nodes
    p = np.zeros((n, svo.row_size))
    p[:, 0] = rng.uniform(floor, bound, size=n)
    sh = rng.uniform(-0.025, 0.025, size=(n, 3, nb2))
    sh[:, :, 0] = rng.uniform(0.2475, 0.5025, size=(n, 3))
    p[:, 4:4 + c] = sh.reshape(n, c)
    svo.params[:] = p
    svo.border[:] = 0.0
    svo.border[0] = floor
    model.background.texels[:] = rng.uniform(0.0, 1.0, size=model.background.texels.shape)
    model.touch()
    return model


def node_lookup(svo: Svo, point, depth: int) -> SvoNode | None:
    """Node at ``depth`` containing ``point`` or its deepest allocated ancestor."""
    p = np.asarray(point, dtype=np.float64)
    hi = svo.root_min + svo.root_side
    if np.any(p < svo.root_min) or np.any(p > hi):
        return None
    ix, iy, iz = _kernels.cell_of(svo.root_min, svo.root_side, int(depth), p)
    node, _ = _kernels.descend(svo.children, svo.lut, int(depth), ix, iy, iz)
    return svo.node(node)

