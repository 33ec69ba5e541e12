"""Recorded forward passes, reverse-mode gradients and a finite-difference oracle.

A ``ForwardTape`` keeps every discrete decision of a batch evaluation (sample
depths, stencil nodes and weights, texel footprints, prior points) so the
backward pass and any replay see exactly the same graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .render import SENSOR_CODES
from .scene import MODE_CODES, SceneModel

NB = _kernels.NB


class TapeMismatchError(RuntimeError):
    """The model changed after the forward pass was recorded."""


@dataclass
class PriorBatch:
    nodes: np.ndarray    # (K,) node indices
    points: np.ndarray   # (K, 3) random point inside each node
    texels: np.ndarray   # (M,) flat texel indices (face * R * R + row * R + col)

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0] + self.texels.shape[0])


def make_prior_batch(model: SceneModel, size: int, rng: np.random.Generator) -> PriorBatch:
    """Uniform node and texel draws; texels get their proportional share."""
    svo = model.svo
    n_tex = model.background.texels.shape[0] * model.background.resolution ** 2
    k_tex = int(size * n_tex // (svo.n_nodes + n_tex)) if size > 0 else 0
    k_nodes = max(size - k_tex, 0)
    nodes = rng.integers(0, svo.n_nodes, size=k_nodes)
    side = svo.root_side / (2.0 ** svo.depth[nodes])
    lo = svo.root_min + svo.coords[nodes] * side[:, None]
    points = lo + rng.uniform(0.0, 1.0, size=(k_nodes, 3)) * side[:, None]
    texels = rng.integers(0, n_tex, size=k_tex)
    return PriorBatch(nodes.astype(np.int64), points, texels.astype(np.int64))


@dataclass
class LossSettings:
    renderer: str = "opacity"
    sensor: str = "identity"
    prior_strength: float = 1e-3
    huber_delta: float = 0.1


@dataclass
class ForwardTape:
    model_id: int
    version: int
    settings: LossSettings
    origins: np.ndarray
    dirs: np.ndarray
    n_samples: np.ndarray
    t: np.ndarray
    footprint: np.ndarray
    step: np.ndarray
    node_idx: np.ndarray
    node_w: np.ndarray
    node_dx: np.ndarray
    raw_opacity: np.ndarray
    raw_radiance: np.ndarray
    texel_idx: np.ndarray
    texel_w: np.ndarray
    raw_background: np.ndarray
    radiance: np.ndarray
    pixel: np.ndarray
    weights: np.ndarray
    targets: np.ndarray
    prior: PriorBatch
    photo: float = 0.0
    prior_loss: float = 0.0

    @property
    def loss(self) -> float:
        return self.photo + self.prior_loss

    @property
    def n_rays(self) -> int:
        return int(self.origins.shape[0])


@dataclass
class GradientSet:
    """Sparse gradient: rows of touched nodes and touched texels."""

    node_ids: np.ndarray
    node_grads: np.ndarray    # (k, P)
    texel_ids: np.ndarray
    texel_grads: np.ndarray   # (m, 3)

    def flat(self, model: SceneModel) -> tuple[np.ndarray, np.ndarray]:
        """Indices into ``model.params`` and matching gradient values."""
        p = model.svo.row_size
        node_flat = (self.node_ids[:, None] * p + np.arange(p)).ravel()
        tex_flat = (model.texel_offset + self.texel_ids[:, None] * 3 + np.arange(3)).ravel()
        return (np.concatenate([node_flat, tex_flat]),
                np.concatenate([self.node_grads.ravel(), self.texel_grads.ravel()]))

    def dense(self, model: SceneModel) -> np.ndarray:
        out = np.zeros(model.n_params)
        idx, val = self.flat(model)
        out[idx] = val
        return out


def _prior_scale(settings: LossSettings, prior: PriorBatch) -> float:
    return settings.prior_strength / prior.size if prior.size else 0.0


def accumulate_priors(model: SceneModel, tape_prior: PriorBatch, settings: LossSettings,
            grad_nodes, touched, grad_tex, touched_tex, do_grad: bool) -> float:
    svo = model.svo
    scale = _prior_scale(settings, tape_prior)
    if scale == 0.0:
        return 0.0
    total = _kernels.node_priors(svo.children, svo.lut, svo.params, svo.border, svo.root_min,
                                 svo.root_side, svo.depth, svo.coords, tape_prior.nodes,
                                 tape_prior.points, svo.channels, settings.huber_delta,
                                 scale, grad_nodes, touched, do_grad)
    total += _kernels.texel_priors(model.background.texels, tape_prior.texels,
                                   settings.huber_delta, scale, grad_tex, touched_tex,
                                   do_grad)
    return float(total)


def forward(model: SceneModel, origins, dirs, n_samples, t, footprint, step,
            targets, prior: PriorBatch, settings: LossSettings) -> ForwardTape:
    """Evaluate the batch objective on fixed samples and record the tape."""
    svo = model.svo
    r = int(np.asarray(origins).shape[0])
    s = int(np.asarray(t).shape[1]) if r else 0
    tape = ForwardTape(
        model_id=id(model), version=model.version, settings=settings,
        origins=np.ascontiguousarray(origins, dtype=np.float64),
        dirs=np.ascontiguousarray(dirs, dtype=np.float64),
        n_samples=np.ascontiguousarray(n_samples, dtype=np.int64),
        t=np.ascontiguousarray(t, dtype=np.float64),
        footprint=np.ascontiguousarray(footprint, dtype=np.float64),
        step=np.ascontiguousarray(step, dtype=np.float64),
        node_idx=np.empty((r, s, NB), dtype=np.int64),
        node_w=np.empty((r, s, NB)), node_dx=np.empty((r, s, NB, 3)),
        raw_opacity=np.zeros((r, s)), raw_radiance=np.zeros((r, s, 3)),
        texel_idx=np.empty((r, 4), dtype=np.int64), texel_w=np.empty((r, 4)),
        raw_background=np.empty((r, 3)), radiance=np.empty((r, 3)),
        pixel=np.empty((r, 3)), weights=np.zeros((r, s)),
        targets=np.asarray(targets, dtype=np.float64).reshape(r, 3), prior=prior)
    _kernels.rays_forward(svo.children, svo.lut, svo.params, svo.border, model.background.texels,
                          svo.root_min, svo.root_side, svo.max_depth, svo.sh_bands,
                          MODE_CODES[settings.renderer], SENSOR_CODES[settings.sensor],
                          tape.origins, tape.dirs, tape.n_samples, tape.t, tape.footprint,
                          tape.step, tape.node_idx, tape.node_w, tape.node_dx,
                          tape.raw_opacity, tape.raw_radiance, tape.texel_idx, tape.texel_w,
                          tape.raw_background, tape.radiance, tape.pixel, tape.weights)
    tape.photo = photo_term(tape.pixel, tape.targets)
    tape.prior_loss = accumulate_priors(model, prior, settings, np.zeros((0, svo.row_size)),
                                        np.zeros(0, dtype=np.bool_), np.zeros((0, 3)),
                                        np.zeros(0, dtype=np.bool_), False)
    return tape


def photo_term(pixel: np.ndarray, targets: np.ndarray) -> float:
    """Mean over pixels of the summed squared channel error."""
    if pixel.shape[0] == 0:
        return 0.0
    return float(np.sum((pixel - targets) ** 2) / pixel.shape[0])


class _Workspace:
    """Reusable dense accumulation buffers; only touched rows are cleared."""

    def __init__(self):
        self.nodes = None
        self.texels = None

    def get(self, model: SceneModel):
        shape = model.svo.params.shape
        n_tex = model.background.texels.size // 3
        if self.nodes is None or self.nodes.shape != shape:
            self.nodes = np.zeros(shape)
            self.touched = np.zeros(shape[0], dtype=np.bool_)
        if self.texels is None or self.texels.shape[0] != n_tex:
            self.texels = np.zeros((n_tex, 3))
            self.touched_tex = np.zeros(n_tex, dtype=np.bool_)
        return self.nodes, self.touched, self.texels, self.touched_tex

    def extract(self) -> GradientSet:
        ids = np.nonzero(self.touched)[0]
        tex = np.nonzero(self.touched_tex)[0]
        out = GradientSet(ids, self.nodes[ids].copy(), tex, self.texels[tex].copy())
        self.nodes[ids] = 0.0
        self.touched[ids] = False
        self.texels[tex] = 0.0
        self.touched_tex[tex] = False
        return out


_WORKSPACE = _Workspace()


def check_tape(model: SceneModel, tape: ForwardTape) -> None:
    if tape.model_id != id(model) or tape.version != model.version:
        raise TapeMismatchError("model was modified after the forward pass was recorded")


def backward(model: SceneModel, tape: ForwardTape, pixel_scale: float | None = None) -> GradientSet:
    """Exact gradients of the recorded objective w.r.t. touched parameters.

    ``pixel_scale`` overrides the 1/B photo normalisation (used for
    linearity checks on sub-batches).
    """
    check_tape(model, tape)
    svo = model.svo
    grad_nodes, touched, grad_tex, touched_tex = _WORKSPACE.get(model)
    r = tape.n_rays
    scale = (1.0 / r if r else 0.0) if pixel_scale is None else pixel_scale
    g_pixel = 2.0 * scale * (tape.pixel - tape.targets)
    _kernels.rays_backward(tape.dirs, tape.n_samples, tape.step, svo.sh_bands,
                           MODE_CODES[tape.settings.renderer],
                           SENSOR_CODES[tape.settings.sensor], tape.node_idx, tape.node_w,
                           tape.node_dx, tape.raw_opacity, tape.raw_radiance, tape.texel_idx,
                           tape.texel_w, tape.raw_background, tape.radiance, g_pixel,
                           grad_nodes, touched, grad_tex, touched_tex)
    accumulate_priors(model, tape.prior, tape.settings, grad_nodes, touched, grad_tex, touched_tex, True)
    return _WORKSPACE.extract()


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class Sites:
    """Values at the non-smooth points of the objective."""

    radiance_raw: np.ndarray
    density_raw: np.ndarray   # raw opacity where the density passes through LiLU
    background_raw: np.ndarray
    sensor_in: np.ndarray
    prior_args: np.ndarray


def replay(model: SceneModel, tape: ForwardTape, with_sites: bool = False):
    """Objective on the taped samples with the current parameters.

    With ``with_sites`` also returns the values at non-smooth points.
    """
    svo = model.svo
    r, s = tape.t.shape
    raw_o = np.zeros((r, s))
    raw_l = np.zeros((r, s, 3))
    idx = np.empty((r, s, NB), dtype=np.int64)
    w = np.empty((r, s, NB))
    dx = np.empty((r, s, NB, 3))
    tex_i = np.empty((r, 4), dtype=np.int64)
    tex_w = np.empty((r, 4))
    bg = np.empty((r, 3))
    rad = np.empty((r, 3))
    pix = np.empty((r, 3))
    wts = np.zeros((r, s))
    _kernels.rays_forward(svo.children, svo.lut, svo.params, svo.border, model.background.texels,
                          svo.root_min, svo.root_side, svo.max_depth, svo.sh_bands,
                          MODE_CODES[tape.settings.renderer],
                          SENSOR_CODES[tape.settings.sensor], tape.origins, tape.dirs,
                          tape.n_samples, tape.t, tape.footprint, tape.step, idx, w, dx,
                          raw_o, raw_l, tex_i, tex_w, bg, rad, pix, wts)
    loss = photo_term(pix, tape.targets)
    loss += accumulate_priors(model, tape.prior, tape.settings, np.zeros((0, svo.row_size)),
                              np.zeros(0, dtype=np.bool_), np.zeros((0, 3)),
                              np.zeros(0, dtype=np.bool_), False)
    if not with_sites:
        return loss
    mask = np.arange(s)[None, :] < tape.n_samples[:, None]
    density = raw_o[mask] if tape.settings.renderer == "exp-lilu" else np.zeros(0)
    sites = Sites(raw_l[mask], density, bg, rad, prior_arguments(model, tape.prior))
    return loss, sites


def prior_arguments(model: SceneModel, prior: PriorBatch) -> np.ndarray:
    """All Huber arguments of the prior batch (for kink detection)."""
    svo = model.svo
    ncol = svo.channels
    args = []
    for j, p in zip(prior.nodes, prior.points):
        d = int(svo.depth[j])
        ell = svo.root_side / (1 << d)
        centre = svo.root_min + (svo.coords[j] + 0.5) * ell
        pts = [centre]
        for axis in range(3):
            for sgn in (-1.0, 1.0):
                q = centre.copy()
                q[axis] += sgn * ell
                pts.append(q)
        vals, _ = _kernels.level_field_and_grad(svo.children, svo.lut, svo.params, svo.border,
                                                svo.root_min, svo.root_side, d,
                                                np.asarray(pts), ncol)
        args.extend(vals[0] - vals[1:])
        at_p, _ = _kernels.level_field_and_grad(svo.children, svo.lut, svo.params, svo.border,
                                                svo.root_min, svo.root_side, d,
                                                p[None, :], ncol)
        args.append(at_p[0])
        d2 = d + 1 if svo.children[j] >= 0 else d - 1
        if d2 >= 0:
            other, _ = _kernels.level_field_and_grad(svo.children, svo.lut, svo.params, svo.border,
                                                     svo.root_min, svo.root_side, d2,
                                                     p[None, :], ncol)
            args.append(at_p[0] - other[0])
    tex = model.background.texels.reshape(-1, 3).astype(np.float64)
    res = model.background.resolution
    for k in prior.texels:
        args.append(tex[k])
        face, rem = divmod(int(k), res * res)
        row, col = divmod(rem, res)
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = row + dr, col + dc
            if 0 <= rr < res and 0 <= cc < res:
                args.append(tex[k] - tex[face * res * res + rr * res + cc])
    if not args:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in args])


@dataclass
class FDReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    status: np.ndarray        # "ok" | "fail" | "nonsmooth" | "truncation"
    h: float
    tolerance: float
    abs_tolerance: float
    checked: int = 0
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def rel_error(self) -> np.ndarray:
        denom = np.maximum(np.abs(self.analytic), np.abs(self.numeric))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(denom > 0, np.abs(self.analytic - self.numeric) / denom, 0.0)

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    @property
    def passed(self) -> bool:
        return not np.any(self.status == "fail") and not np.any(self.status == "truncation")

    def count(self, status: str) -> int:
        return int(np.sum(self.status == status))

    def summary(self) -> str:
        return (f"checked={self.checked} ok={self.count('ok')} fail={self.count('fail')} "
                f"nonsmooth={self.count('nonsmooth')} truncation={self.count('truncation')} "
                f"max_rel_error={self.max_rel_error:.3e} "
                f"max_abs_error={self.max_abs_error:.3e} h={self.h:g}")


def _near_kink(base: Sites, plus: Sites, minus: Sites, delta: float) -> bool:
    """True if the perturbation reaches within 10h of a kink or a clamped site."""
    pairs = [
        (base.radiance_raw, plus.radiance_raw, minus.radiance_raw, (0.0,), True),
        (base.density_raw, plus.density_raw, minus.density_raw, (0.0,), True),
        (base.background_raw, plus.background_raw, minus.background_raw, (0.0,), True),
        (base.sensor_in, plus.sensor_in, minus.sensor_in, (0.0, 1.0), False),
        (base.prior_args, plus.prior_args, minus.prior_args, (-delta, delta), False),
    ]
    for b, p, m, kinks, lower_clamp in pairs:
        if b.size == 0:
            continue
        span = 0.5 * np.abs(p - m)
        moved = span > 0
        if not np.any(moved):
            continue
        reach = 10.0 * span
        for k in kinks:
            if np.any(moved & (np.abs(b - k) <= reach)):
                return True
        if lower_clamp and np.any(moved & (b <= 0.0)):
            return True
        if kinks == (0.0, 1.0) and np.any(moved & ((b < 0.0) | (b > 1.0))):
            return True
    return False


def _perturbation_hits_kink(model: SceneModel, tape: ForwardTape, i: int,
                            keep: float, h: float) -> bool:
    params = model.params
    params[i] = keep
    _, base = replay(model, tape, True)
    params[i] = keep + h
    _, plus = replay(model, tape, True)
    params[i] = keep - h
    _, minus = replay(model, tape, True)
    params[i] = keep
    return _near_kink(base, plus, minus, tape.settings.huber_delta)


def finite_difference_check(model: SceneModel, tape: ForwardTape, h: float = 1e-5,
                            tolerance: float = 1e-4, abs_tolerance: float | None = None,
                            indices=None, max_params: int | None = None,
                            rng: np.random.Generator | None = None) -> FDReport:
    """Compare analytic gradients with central differences on the replayed tape.

    The model should be float64; parameters are perturbed in place and
    restored bitwise afterwards.
    """
    if model.dtype != np.float64:
        raise TypeError("finite-difference checks need a float64 model (use model.astype)")
    grads = backward(model, tape)
    flat_idx, flat_val = grads.flat(model)
    analytic_all = dict(zip(flat_idx.tolist(), flat_val.tolist()))
    if indices is None:
        indices = flat_idx
        if max_params is not None and indices.size > max_params:
            rng = rng or np.random.default_rng(0)
            indices = np.sort(rng.choice(indices, size=max_params, replace=False))
    indices = np.asarray(indices, dtype=np.int64)
    abs_tol = 10.0 * h * h if abs_tolerance is None else abs_tolerance
    params = model.params
    analytic = np.array([analytic_all.get(int(i), 0.0) for i in indices])
    numeric = np.empty(indices.size)
    status = np.empty(indices.size, dtype=object)
    for n, i in enumerate(indices):
        keep = params[i]
        params[i] = keep + h
        lp = replay(model, tape)
        params[i] = keep - h
        lm = replay(model, tape)
        fd = (lp - lm) / (2.0 * h)
        numeric[n] = fd
        err = abs(fd - analytic[n])
        rel = err / max(abs(fd), abs(analytic[n])) if err > 0 else 0.0
        if rel <= tolerance or err <= abs_tol:
            status[n] = "ok"
        elif _perturbation_hits_kink(model, tape, i, keep, h):
            status[n] = "nonsmooth"
        else:
            half = h / 2
            params[i] = keep + half
            lp2 = replay(model, tape)
            params[i] = keep - half
            lm2 = replay(model, tape)
            fd2 = (lp2 - lm2) / (2.0 * half)
            status[n] = "truncation" if abs(fd - fd2) >= 0.25 * err else "fail"
        params[i] = keep
    report = FDReport(indices, analytic, numeric, status.astype(str), h, tolerance, abs_tol,
                      checked=int(indices.size))
    smooth = report.status != "nonsmooth"
    if np.any(smooth):
        report.max_abs_error = float(np.max(report.abs_error[smooth]))
        report.max_rel_error = float(np.max(np.where(report.abs_error[smooth] <= abs_tol, 0.0,
                                                     report.rel_error[smooth])))
    return report
