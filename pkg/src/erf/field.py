"""Continuous 4D fields of an octree: position plus level of detail.

Every level stores local planes (value + gradient). A query blends the eight
dual-grid neighbours at the finest level whose node side still covers the
query footprint with the eight at the next coarser level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .constraints import lilu_forward, tanh01
from .scene import Svo
from .sh import sh_basis

FIELDS = ("opacity", "sh")
NORMAL_EPS = 1e-12


@dataclass
class Query4D:
    pos: np.ndarray
    footprint: float


@dataclass
class FieldSample:
    """Batched field query result."""

    value: np.ndarray       # (Q, D)
    gradient: np.ndarray    # (Q, 3, D) spatial derivative
    nodes: np.ndarray       # (Q, 16) node index per stencil slot, -1 = border
    weights: np.ndarray     # (Q, 16)
    fine_depth: np.ndarray  # (Q,)
    lod_weight: np.ndarray  # (Q,)


def _columns(svo: Svo, field: str) -> tuple[int, int]:
    if field == "opacity":
        return 0, 1
    if field == "sh":
        return 4, svo.channels
    raise ValueError(f"unknown field {field!r}")


def _as_queries(pos, footprint) -> tuple[np.ndarray, np.ndarray]:
    pos = np.ascontiguousarray(np.asarray(pos, dtype=np.float64).reshape(-1, 3))
    sigma = np.broadcast_to(np.asarray(footprint, dtype=np.float64), pos.shape[:1])
    return pos, np.ascontiguousarray(sigma)


def query(svo: Svo, pos, footprint, field: str = "opacity") -> FieldSample:
    """Evaluate a raw field and its spatial gradient at many 4D points."""
    col0, ncol = _columns(svo, field)
    pos, sigma = _as_queries(pos, footprint)
    q = pos.shape[0]
    out = FieldSample(np.empty((q, ncol)), np.empty((q, 3, ncol)),
                      np.empty((q, _kernels.NB), dtype=np.int64),
                      np.empty((q, _kernels.NB)), np.empty(q, dtype=np.int64),
                      np.empty(q))
    _kernels.query_field(svo.children, svo.lut, svo.params, svo.border, svo.root_min,
                         svo.root_side, svo.max_depth, pos, sigma, col0, ncol,
                         out.value, out.gradient, out.nodes, out.weights,
                         out.fine_depth, out.lod_weight)
    return out


def select_depths(svo: Svo, q: Query4D) -> tuple[int, float]:
    """Fine level for the footprint (clamped to the branch) and blend weight."""
    fine, w = _kernels.select_depths(svo.children, svo.lut, svo.root_min, svo.root_side,
                                     svo.max_depth, np.asarray(q.pos, dtype=np.float64),
                                     float(q.footprint))
    return int(fine), float(w)


def interp4d(svo: Svo, q: Query4D, field: str = "opacity") -> np.ndarray:
    return query(svo, q.pos, q.footprint, field).value[0]


def eval_opacity(svo: Svo, q: Query4D) -> float:
    return float(tanh01(interp4d(svo, q, "opacity")[0]))


def eval_radiance(svo: Svo, q: Query4D, direction) -> np.ndarray:
    """Non-negative RGB leaving the query point along ``direction``."""
    coeffs = interp4d(svo, q, "sh").reshape(3, svo.sh_bands ** 2)
    return lilu_forward(coeffs @ sh_basis(svo.sh_bands, direction))


def eval_normal(svo: Svo, q: Query4D) -> np.ndarray | None:
    """Unit normal pointing against the raw opacity gradient, or None if flat."""
    g = query(svo, q.pos, q.footprint, "opacity").gradient[0, :, 0]
    norm = float(np.linalg.norm(g))
    if norm < NORMAL_EPS:
        return None
    return -g / norm
