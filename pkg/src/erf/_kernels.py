"""Compiled inner loops shared by rendering, sampling, gradients and priors.

Everything here works on plain arrays so numba can compile it. The octree is
passed as ``children`` (first-child index per node, -1 for leaves), a dense
per-level lookup ``lut`` (see ``build_lut``) and the node parameter matrix ``params`` whose rows are laid out as::

    [o_f0, o_gx, o_gy, o_gz, sh_f0[C], sh_gx[C], sh_gy[C], sh_gz[C]]

with ``C = 3 * bands**2`` (channel-major SH coefficients). ``border`` is a
row of the same layout used for every missing neighbour.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

NB = 16  # 4D stencil size: 8 nodes at the fine level + 8 at the coarser one

MODE_OPACITY = 0
MODE_EXP_SOFTPLUS = 1
MODE_EXP_LILU = 2

SENSOR_IDENTITY = 0
SENSOR_GAMMA = 1

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


# ---------------------------------------------------------------------------
# counter-based random numbers (independent of thread scheduling)

@njit(cache=True, _nrt=False, error_model="numpy")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, error_model="numpy")
def rng_seed(seed, a, b):
    state = np.empty(1, dtype=np.uint64)
    z = _mix64(np.uint64(seed) + _GOLDEN)
    z = _mix64(z ^ (np.uint64(a) * _M1 + _GOLDEN))
    z = _mix64(z ^ (np.uint64(b) * _M2 + _GOLDEN))
    state[0] = z
    return state


@njit(cache=True, _nrt=False, error_model="numpy")
def rng_uniform(state):
    state[0] = state[0] + _GOLDEN
    z = _mix64(state[0])
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# scalar constraints

@njit(cache=True, _nrt=False, error_model="numpy")
def tanh01(x):
    # logistic form of 0.5 * (tanh(4x - 2) + 1), exact in the lower tail
    return 1.0 / (1.0 + math.exp(4.0 - 8.0 * x))


@njit(cache=True, _nrt=False, error_model="numpy")
def tanh01_grad(x):
    z = 8.0 * x - 4.0
    return 8.0 / ((1.0 + math.exp(-z)) * (1.0 + math.exp(z)))


@njit(cache=True, _nrt=False, error_model="numpy")
def softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, _nrt=False, error_model="numpy")
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, _nrt=False, error_model="numpy")
def lilu_backward(x, g):
    if x <= 0.0 and g > 0.0:
        return 0.0
    return g


@njit(cache=True, _nrt=False, error_model="numpy")
def point_opacity(raw, mode, step):
    """Constrained per-sample opacity and its derivative w.r.t. ``raw``."""
    if mode == MODE_OPACITY:
        return tanh01(raw), tanh01_grad(raw)
    if mode == MODE_EXP_SOFTPLUS:
        rho = softplus(raw)
        e = math.exp(-rho * step)
        return 1.0 - e, step * e * sigmoid(raw)
    rho = raw if raw > 0.0 else 0.0
    e = math.exp(-rho * step)
    return 1.0 - e, step * e


@njit(cache=True, _nrt=False, error_model="numpy")
def opacity_raw_backward(raw, mode, step, g_o):
    """Upstream gradient on opacity -> gradient on the raw field value."""
    if mode == MODE_OPACITY:
        return g_o * tanh01_grad(raw)
    if mode == MODE_EXP_SOFTPLUS:
        rho = softplus(raw)
        return g_o * step * math.exp(-rho * step) * sigmoid(raw)
    rho = raw if raw > 0.0 else 0.0
    g_rho = g_o * step * math.exp(-rho * step)
    return lilu_backward(raw, g_rho)


@njit(cache=True, _nrt=False, error_model="numpy")
def sensor_forward(x, mode):
    y = min(max(x, 0.0), 1.0)
    if mode == SENSOR_GAMMA:
        return y ** (1.0 / 2.2)
    return y


@njit(cache=True, _nrt=False, error_model="numpy")
def sensor_backward(x, mode, g):
    # Clamp with a pseudo-gradient: steps leading back into [0, 1] pass.
    if x > 1.0:
        return g if g > 0.0 else 0.0
    if x < 0.0:
        return g if g < 0.0 else 0.0
    if mode == SENSOR_GAMMA:
        return g * (1.0 / 2.2) * max(x, 1e-6) ** (1.0 / 2.2 - 1.0)
    return g


# ---------------------------------------------------------------------------
# spherical harmonics (real basis, Cartesian form)

@njit(cache=True, _nrt=False, error_model="numpy")
def sh_basis(bands, x, y, z, out):
    out[0] = SH_C0
    if bands > 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if bands > 2:
        xx = x * x
        yy = y * y
        zz = z * z
        out[4] = SH_C2[0] * x * y
        out[5] = SH_C2[1] * y * z
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[7] = SH_C2[3] * x * z
        out[8] = SH_C2[4] * (xx - yy)
        if bands > 3:
            out[9] = SH_C3[0] * y * (3.0 * xx - yy)
            out[10] = SH_C3[1] * x * y * z
            out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
            out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
            out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
            out[14] = SH_C3[5] * z * (xx - yy)
            out[15] = SH_C3[6] * x * (xx - 3.0 * yy)


# ---------------------------------------------------------------------------
# octree addressing

LUT_MAX_DEPTH = 7  # dense per-level lookup covers at most 2**21 cells per level


@njit(cache=True, _nrt=False, error_model="numpy")
def lut_offset(d):
    return 1 + ((1 << (3 * d)) - 1) // 7


@njit(cache=True, error_model="numpy")
def build_lut(children, depth, coords, lut_depth):
    """Dense node lookup for levels 0..lut_depth; ``lut[0]`` stores lut_depth."""
    lut = np.full(lut_offset(lut_depth + 1), -1, dtype=np.int32)
    lut[0] = lut_depth
    for i in range(depth.shape[0]):
        d = depth[i]
        if d <= lut_depth:
            n = 1 << d
            lut[lut_offset(d) + (coords[i, 2] * n + coords[i, 1]) * n + coords[i, 0]] = i
    return lut


@njit(cache=True, _nrt=False, error_model="numpy")
def descend(children, lut, target, ix, iy, iz):
    """Deepest allocated node on the path to virtual cell (ix, iy, iz) at depth
    ``target``, and its depth."""
    top = lut[0]
    start = target if target < top else top
    s = target - start
    n = 1 << start
    node = lut[lut_offset(start) + (((iz >> s) * n + (iy >> s)) * n + (ix >> s))]
    if node < 0:
        for k in range(start - 1, -1, -1):
            s = target - k
            n = 1 << k
            node = lut[lut_offset(k) + (((iz >> s) * n + (iy >> s)) * n + (ix >> s))]
            if node >= 0:
                return node, k
        return 0, 0
    for k in range(start, target):
        c = children[node]
        if c < 0:
            return node, k
        s = target - 1 - k
        node = c + (((ix >> s) & 1) | (((iy >> s) & 1) << 1) | (((iz >> s) & 1) << 2))
    return node, target


@njit(cache=True, _nrt=False, error_model="numpy")
def node_at(children, lut, target, ix, iy, iz):
    """Node at exactly (target, ix, iy, iz), or -1 when it is not allocated."""
    if target <= lut[0]:
        n = 1 << target
        return lut[lut_offset(target) + (iz * n + iy) * n + ix]
    node, reached = descend(children, lut, target, ix, iy, iz)
    return node if reached == target else -1


@njit(cache=True, _nrt=False, error_model="numpy")
def cell_of(root_min, root_side, d, x):
    n = 1 << d
    ell = root_side / n
    ix = int(math.floor((x[0] - root_min[0]) / ell))
    iy = int(math.floor((x[1] - root_min[1]) / ell))
    iz = int(math.floor((x[2] - root_min[2]) / ell))
    ix = min(max(ix, 0), n - 1)
    iy = min(max(iy, 0), n - 1)
    iz = min(max(iz, 0), n - 1)
    return ix, iy, iz


@njit(cache=True, _nrt=False, error_model="numpy")
def nyquist_depth(root_side, sigma, max_depth):
    """Level f with side(f) <= sigma < side(f - 1), clamped to [0, max_depth]."""
    d = 0
    ell = root_side
    while d < max_depth and ell > sigma:
        ell *= 0.5
        d += 1
    return d


@njit(cache=True, _nrt=False, error_model="numpy")
def select_depths(children, lut, root_min, root_side, max_depth, x, sigma):
    target = nyquist_depth(root_side, sigma, max_depth)
    ix, iy, iz = cell_of(root_min, root_side, target, x)
    _, fine = descend(children, lut, target, ix, iy, iz)
    if fine == 0:
        return 0, 0.0
    ell_f = root_side / (1 << fine)
    w = (sigma - ell_f) / ell_f  # coarser side is 2 * ell_f
    w = min(max(w, 0.0), 1.0)
    return fine, w


@njit(cache=True, _nrt=False, error_model="numpy")
def gather_level(children, lut, root_min, root_side, d, x, scale,
                 idx, w, dw, dx, base):
    """Dual-grid trilinear stencil at depth ``d`` written to slots base..base+7.

    ``w`` receives weights times ``scale``, ``dw`` their spatial derivatives,
    ``dx`` the offsets from each node centre to ``x``.
    """
    n = 1 << d
    ell = root_side / n
    u0 = (x[0] - root_min[0]) / ell - 0.5
    u1 = (x[1] - root_min[1]) / ell - 0.5
    u2 = (x[2] - root_min[2]) / ell - 0.5
    i0 = int(math.floor(u0))
    i1 = int(math.floor(u1))
    i2 = int(math.floor(u2))
    f0 = u0 - i0
    f1 = u1 - i1
    f2 = u2 - i2
    inv = 1.0 / ell
    direct = d <= lut[0]
    off = lut_offset(d) if direct else 0
    for corner in range(8):
        b0 = corner & 1
        b1 = (corner >> 1) & 1
        b2 = (corner >> 2) & 1
        c0 = i0 + b0
        c1 = i1 + b1
        c2 = i2 + b2
        a0 = f0 if b0 else 1.0 - f0
        a1 = f1 if b1 else 1.0 - f1
        a2 = f2 if b2 else 1.0 - f2
        s0 = inv if b0 else -inv
        s1 = inv if b1 else -inv
        s2 = inv if b2 else -inv
        k = base + corner
        w[k] = scale * a0 * a1 * a2
        dw[k, 0] = scale * s0 * a1 * a2
        dw[k, 1] = scale * a0 * s1 * a2
        dw[k, 2] = scale * a0 * a1 * s2
        dx[k, 0] = x[0] - (root_min[0] + (c0 + 0.5) * ell)
        dx[k, 1] = x[1] - (root_min[1] + (c1 + 0.5) * ell)
        dx[k, 2] = x[2] - (root_min[2] + (c2 + 0.5) * ell)
        node = -1
        if 0 <= c0 < n and 0 <= c1 < n and 0 <= c2 < n:
            if direct:
                node = lut[off + (c2 * n + c1) * n + c0]
            else:
                node = node_at(children, lut, d, c0, c1, c2)
        idx[k] = node


@njit(cache=True, _nrt=False, error_model="numpy")
def gather4d(children, lut, root_min, root_side, max_depth, x, sigma,
             idx, w, dw, dx):
    """Fill the 16-slot 4D stencil; returns (fine depth, LoD weight)."""
    fine, lw = select_depths(children, lut, root_min, root_side, max_depth, x, sigma)
    gather_level(children, lut, root_min, root_side, fine, x, 1.0 - lw, idx, w, dw, dx, 0)
    if fine > 0:
        gather_level(children, lut, root_min, root_side, fine - 1, x, lw, idx, w, dw, dx, 8)
    else:
        for k in range(8, NB):
            idx[k] = -1
            w[k] = 0.0
            dw[k, 0] = 0.0
            dw[k, 1] = 0.0
            dw[k, 2] = 0.0
            dx[k, 0] = 0.0
            dx[k, 1] = 0.0
            dx[k, 2] = 0.0
    return fine, lw


@njit(cache=True, _nrt=False, error_model="numpy")
def eval_planes(params, border, col0, ncol, idx, w, dx, count, out):
    for c in range(ncol):
        out[c] = 0.0
    c1 = col0 + ncol
    c2 = col0 + 2 * ncol
    c3 = col0 + 3 * ncol
    for j in range(count):
        wj = w[j]
        if wj == 0.0:
            continue
        node = idx[j]
        x0 = dx[j, 0]
        x1 = dx[j, 1]
        x2 = dx[j, 2]
        if node >= 0:
            for c in range(ncol):
                out[c] += wj * (params[node, col0 + c] + x0 * params[node, c1 + c]
                                + x1 * params[node, c2 + c] + x2 * params[node, c3 + c])
        else:
            for c in range(ncol):
                out[c] += wj * (border[col0 + c] + x0 * border[c1 + c]
                                + x1 * border[c2 + c] + x2 * border[c3 + c])


@njit(cache=True, _nrt=False, error_model="numpy")
def eval_planes_spatial_grad(params, border, col0, ncol, idx, w, dw, dx, count, out):
    """d/dx of the interpolated field, ``out`` has shape (3, ncol)."""
    for a in range(3):
        for c in range(ncol):
            out[a, c] = 0.0
    for j in range(count):
        if idx[j] >= 0:
            row = params[idx[j]]
        else:
            row = border
        for c in range(ncol):
            val = (row[col0 + c]
                   + dx[j, 0] * row[col0 + ncol + c]
                   + dx[j, 1] * row[col0 + 2 * ncol + c]
                   + dx[j, 2] * row[col0 + 3 * ncol + c])
            for a in range(3):
                out[a, c] += dw[j, a] * val + w[j] * row[col0 + (a + 1) * ncol + c]


@njit(cache=True, _nrt=False, error_model="numpy")
def scatter_planes(grad, touched, col0, ncol, idx, w, dx, count, g):
    c1 = col0 + ncol
    c2 = col0 + 2 * ncol
    c3 = col0 + 3 * ncol
    for j in range(count):
        node = idx[j]
        wj = w[j]
        if node < 0 or wj == 0.0:
            continue
        touched[node] = True
        x0 = wj * dx[j, 0]
        x1 = wj * dx[j, 1]
        x2 = wj * dx[j, 2]
        for c in range(ncol):
            gc = g[c]
            grad[node, col0 + c] += wj * gc
            grad[node, c1 + c] += x0 * gc
            grad[node, c2 + c] += x1 * gc
            grad[node, c3 + c] += x2 * gc


# ---------------------------------------------------------------------------
# background cube map

@njit(cache=True, _nrt=False, error_model="numpy")
def cube_texels(res, vx, vy, vz, tex_idx, tex_w):
    """Bilinear footprint of direction v: 4 flat texel indices and weights."""
    ax = abs(vx)
    ay = abs(vy)
    az = abs(vz)
    if ax >= ay and ax >= az:
        ma = ax
        if vx > 0.0:
            face, sc, tc = 0, -vz, -vy
        else:
            face, sc, tc = 1, vz, -vy
    elif ay >= az:
        ma = ay
        if vy > 0.0:
            face, sc, tc = 2, vx, vz
        else:
            face, sc, tc = 3, vx, -vz
    else:
        ma = az
        if vz > 0.0:
            face, sc, tc = 4, vx, -vy
        else:
            face, sc, tc = 5, -vx, -vy
    s = 0.5 * (sc / ma + 1.0)
    t = 0.5 * (tc / ma + 1.0)
    fs = min(max(s * res - 0.5, 0.0), res - 1.0)
    ft = min(max(t * res - 0.5, 0.0), res - 1.0)
    c0 = min(int(math.floor(fs)), res - 1)
    r0 = min(int(math.floor(ft)), res - 1)
    a = fs - c0
    b = ft - r0
    c1 = min(c0 + 1, res - 1)
    r1 = min(r0 + 1, res - 1)
    base = face * res * res
    tex_idx[0] = base + r0 * res + c0
    tex_idx[1] = base + r0 * res + c1
    tex_idx[2] = base + r1 * res + c0
    tex_idx[3] = base + r1 * res + c1
    tex_w[0] = (1.0 - a) * (1.0 - b)
    tex_w[1] = a * (1.0 - b)
    tex_w[2] = (1.0 - a) * b
    tex_w[3] = a * b


# ---------------------------------------------------------------------------
# ray traversal and stratified sampling

@njit(cache=True, _nrt=False, error_model="numpy")
def _slab_exit(o, d, lo, hi):
    t_exit = np.inf
    for a in range(3):
        if d[a] > 0.0:
            t = (hi[a] - o[a]) / d[a]
        elif d[a] < 0.0:
            t = (lo[a] - o[a]) / d[a]
        else:
            continue
        if t < t_exit:
            t_exit = t
    return t_exit


@njit(cache=True, error_model="numpy")
def traverse_ray(children, lut, root_min, root_side, max_depth, o, d, t_near, t_far,
                 fp_slope, n_side, state, cap, reservoir, out_t, out_s, out_dt):
    """Stratified LoD-aware samples along one ray.

    With ``reservoir`` the first ``cap`` slots hold a uniform random subset of
    all generated samples (unsorted); otherwise samples are appended until
    ``cap`` is full. Returns the total number generated.
    """
    total = 0
    t = t_near
    eps = 1e-9 * root_side
    x = np.empty(3)
    lo = np.empty(3)
    hi = np.empty(3)
    while t < t_far - eps:
        probe = t + eps
        for a in range(3):
            x[a] = o[a] + d[a] * probe
        sigma = fp_slope * t
        target = nyquist_depth(root_side, sigma, max_depth)
        ix, iy, iz = cell_of(root_min, root_side, target, x)
        node, reached = descend(children, lut, target, ix, iy, iz)
        level = target if reached == target else reached + 1
        n = 1 << level
        ell = root_side / n
        cx, cy, cz = cell_of(root_min, root_side, level, x)
        lo[0] = root_min[0] + cx * ell
        lo[1] = root_min[1] + cy * ell
        lo[2] = root_min[2] + cz * ell
        hi[0] = lo[0] + ell
        hi[1] = lo[1] + ell
        hi[2] = lo[2] + ell
        t_exit = min(_slab_exit(o, d, lo, hi), t_far)
        if t_exit <= t + eps:
            t_exit = t + eps
        if reached == target:
            length = t_exit - t
            count = int(math.ceil(n_side * length / ell - 1e-9))
            if count < 1:
                count = 1
            stratum = length / count
            for k in range(count):
                ts = t + (k + rng_uniform(state)) * stratum
                if reservoir:
                    if total < cap:
                        slot = total
                    else:
                        slot = int(rng_uniform(state) * (total + 1))
                    if slot < cap:
                        out_t[slot] = ts
                        out_s[slot] = fp_slope * ts
                        out_dt[slot] = stratum
                else:
                    if total < cap:
                        out_t[total] = ts
                        out_s[total] = fp_slope * ts
                        out_dt[total] = stratum
                total += 1
        t = t_exit
    return total


@njit(cache=True, error_model="numpy")
def sort_samples(n, ts, ss, dts):
    order = np.argsort(ts[:n], kind="mergesort")
    tt = ts[:n][order].copy()
    sx = ss[:n][order].copy()
    dd = dts[:n][order].copy()
    ts[:n] = tt
    ss[:n] = sx
    dts[:n] = dd


@njit(cache=True, error_model="numpy")
def weighted_subset(weights, k, state):
    """Indices (ascending) of a k-subset drawn without replacement.

    Exponential-race keys: the k largest log(u)/w are selected.
    """
    n = weights.shape[0]
    keys = np.empty(n)
    for i in range(n):
        u = rng_uniform(state)
        while u <= 0.0:
            u = rng_uniform(state)
        keys[i] = math.log(u) / weights[i]
    order = np.argsort(-keys, kind="mergesort")[:k]
    return np.sort(order)


@njit(cache=True, error_model="numpy")
def uniform_subset(n, k, state):
    """Indices (ascending) of a uniform random k-subset of range(n)."""
    chosen = np.arange(n)
    for i in range(k):
        j = i + int(rng_uniform(state) * (n - i))
        tmp = chosen[i]
        chosen[i] = chosen[j]
        chosen[j] = tmp
    return np.sort(chosen[:k])


@njit(cache=True, _nrt=False, error_model="numpy")
def opacity_at(children, lut, params, border, root_min, root_side, max_depth,
               x, sigma, mode, step, idx, w, dw, dx, tmp):
    gather4d(children, lut, root_min, root_side, max_depth, x, sigma, idx, w, dw, dx)
    eval_planes(params, border, 0, 1, idx, w, dx, NB, tmp)
    o, _ = point_opacity(tmp[0], mode, step)
    return o


@njit(cache=True, error_model="numpy")
def sample_rays(children, lut, params, border, root_min, root_side, max_depth,
                origins, dirs, t_near, t_far, fp_slope, valid, n_side,
                n_max, n_max_o, c_weight, mode, seed, stream,
                out_t, out_s, out_dt, out_n):
    """Training-time three-stage sampling for a batch of rays."""
    n_rays = origins.shape[0]
    res_t = np.empty(n_max)
    res_s = np.empty(n_max)
    res_dt = np.empty(n_max)
    idx = np.empty(NB, dtype=np.int64)
    w = np.empty(NB)
    dw = np.empty((NB, 3))
    dx = np.empty((NB, 3))
    tmp = np.empty(1)
    x = np.empty(3)
    for r in range(n_rays):
        out_n[r] = 0
        if not valid[r]:
            continue
        state = rng_seed(seed, stream, r)
        total = traverse_ray(children, lut, root_min, root_side, max_depth,
                             origins[r], dirs[r], t_near[r], t_far[r], fp_slope[r],
                             n_side, state, n_max, True, res_t, res_s, res_dt)
        m = min(total, n_max)
        sort_samples(m, res_t, res_s, res_dt)
        if m > n_max_o:
            wts = np.empty(m)
            for i in range(m):
                for a in range(3):
                    x[a] = origins[r, a] + dirs[r, a] * res_t[i]
                o = opacity_at(children, lut, params, border, root_min, root_side,
                               max_depth, x, res_s[i], mode, res_dt[i],
                               idx, w, dw, dx, tmp)
                wts[i] = c_weight + o
            keep = weighted_subset(wts, n_max_o, state)
            for i in range(n_max_o):
                out_t[r, i] = res_t[keep[i]]
                out_s[r, i] = res_s[keep[i]]
                out_dt[r, i] = res_dt[keep[i]]
            out_n[r] = n_max_o
        else:
            for i in range(m):
                out_t[r, i] = res_t[i]
                out_s[r, i] = res_s[i]
                out_dt[r, i] = res_dt[i]
            out_n[r] = m


# ---------------------------------------------------------------------------
# differentiable ray evaluation

@njit(cache=True, error_model="numpy")
def rays_forward(children, lut, params, border, texels, root_min, root_side, max_depth,
                 bands, mode, sensor, origins, dirs, n_samples, ts, ss, dts,
                 tape_idx, tape_w, tape_dx, raw_o, raw_l, bg_idx, bg_w, bg_raw,
                 radiance, pixel, weights_out):
    """Evaluate rays on fixed sample sets and record everything backward needs."""
    n_rays = origins.shape[0]
    ncol = 3 * bands * bands
    nb2 = bands * bands
    res = texels.shape[1]
    flat_tex = texels.reshape(-1, 3)
    basis = np.empty(nb2)
    coef = np.empty(ncol)
    dw = np.empty((NB, 3))
    x = np.empty(3)
    tmp = np.empty(1)
    for r in range(n_rays):
        vx = -dirs[r, 0]
        vy = -dirs[r, 1]
        vz = -dirs[r, 2]
        sh_basis(bands, vx, vy, vz, basis)
        trans = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for i in range(n_samples[r]):
            for a in range(3):
                x[a] = origins[r, a] + dirs[r, a] * ts[r, i]
            gather4d(children, lut, root_min, root_side, max_depth, x, ss[r, i],
                     tape_idx[r, i], tape_w[r, i], dw, tape_dx[r, i])
            eval_planes(params, border, 0, 1, tape_idx[r, i], tape_w[r, i],
                        tape_dx[r, i], NB, tmp)
            raw_o[r, i] = tmp[0]
            o, _ = point_opacity(tmp[0], mode, dts[r, i])
            eval_planes(params, border, 4, ncol, tape_idx[r, i], tape_w[r, i],
                        tape_dx[r, i], NB, coef)
            wi = trans * o
            weights_out[r, i] = wi
            for c in range(3):
                v = 0.0
                for k in range(nb2):
                    v += coef[c * nb2 + k] * basis[k]
                raw_l[r, i, c] = v
            acc0 += wi * max(raw_l[r, i, 0], 0.0)
            acc1 += wi * max(raw_l[r, i, 1], 0.0)
            acc2 += wi * max(raw_l[r, i, 2], 0.0)
            trans *= 1.0 - o
        cube_texels(res, vx, vy, vz, bg_idx[r], bg_w[r])
        for c in range(3):
            v = 0.0
            for k in range(4):
                v += bg_w[r, k] * flat_tex[bg_idx[r, k], c]
            bg_raw[r, c] = v
        radiance[r, 0] = acc0 + trans * max(bg_raw[r, 0], 0.0)
        radiance[r, 1] = acc1 + trans * max(bg_raw[r, 1], 0.0)
        radiance[r, 2] = acc2 + trans * max(bg_raw[r, 2], 0.0)
        for c in range(3):
            pixel[r, c] = sensor_forward(radiance[r, c], sensor)


@njit(cache=True, error_model="numpy")
def rays_backward(dirs, n_samples, dts, bands, mode, sensor, tape_idx, tape_w,
                  tape_dx, raw_o, raw_l, bg_idx, bg_w, bg_raw, radiance,
                  g_pixel, grad_nodes, touched, grad_tex, touched_tex):
    n_rays = dirs.shape[0]
    ncol = 3 * bands * bands
    nb2 = bands * bands
    basis = np.empty(nb2)
    g_coef = np.empty(ncol)
    g_raw = np.empty(1)
    max_s = raw_o.shape[1]
    opac = np.empty(max_s)
    trans = np.empty(max_s + 1)
    lrad = np.empty((max_s, 3))
    g_rad = np.empty(3)
    behind = np.empty(3)
    for r in range(n_rays):
        for c in range(3):
            g_rad[c] = sensor_backward(radiance[r, c], sensor, g_pixel[r, c])
        n = n_samples[r]
        trans[0] = 1.0
        for i in range(n):
            opac[i], _ = point_opacity(raw_o[r, i], mode, dts[r, i])
            trans[i + 1] = trans[i] * (1.0 - opac[i])
            for c in range(3):
                lrad[i, c] = max(raw_l[r, i, c], 0.0)
        t_far = trans[n]
        # background
        for c in range(3):
            gb = lilu_backward(bg_raw[r, c], g_rad[c] * t_far)
            if gb != 0.0:
                for k in range(4):
                    grad_tex[bg_idx[r, k], c] += bg_w[r, k] * gb
            for k in range(4):
                if bg_w[r, k] != 0.0:
                    touched_tex[bg_idx[r, k]] = True
            behind[c] = max(bg_raw[r, c], 0.0)
        sh_basis(bands, -dirs[r, 0], -dirs[r, 1], -dirs[r, 2], basis)
        for i in range(n - 1, -1, -1):
            wi = trans[i] * opac[i]
            # d pixel / d opacity_i = T_i * (L_i - radiance behind sample i)
            g_o = 0.0
            for c in range(3):
                g_o += g_rad[c] * trans[i] * (lrad[i, c] - behind[c])
            g_raw[0] = opacity_raw_backward(raw_o[r, i], mode, dts[r, i], g_o)
            scatter_planes(grad_nodes, touched, 0, 1, tape_idx[r, i], tape_w[r, i],
                           tape_dx[r, i], NB, g_raw)
            for c in range(3):
                gl = lilu_backward(raw_l[r, i, c], g_rad[c] * wi)
                for k in range(nb2):
                    g_coef[c * nb2 + k] = gl * basis[k]
            scatter_planes(grad_nodes, touched, 4, ncol, tape_idx[r, i], tape_w[r, i],
                           tape_dx[r, i], NB, g_coef)
            for c in range(3):
                behind[c] = opac[i] * lrad[i, c] + (1.0 - opac[i]) * behind[c]


@njit(cache=True, error_model="numpy")
def render_rays(children, lut, params, border, texels, root_min, root_side, max_depth,
                bands, mode, sensor, origins, dirs, t_near, t_far, fp_slope, valid,
                n_side, seed, stream, cap, out_rgb, out_opacity, out_depth,
                out_normal):
    """Unfiltered rendering; returns the number of rays whose sample buffer overflowed."""
    n_rays = origins.shape[0]
    ncol = 3 * bands * bands
    nb2 = bands * bands
    res = texels.shape[1]
    flat_tex = texels.reshape(-1, 3)
    buf_t = np.empty(cap)
    buf_s = np.empty(cap)
    buf_dt = np.empty(cap)
    basis = np.empty(nb2)
    coef = np.empty(ncol)
    idx = np.empty(NB, dtype=np.int64)
    w = np.empty(NB)
    dw = np.empty((NB, 3))
    dx = np.empty((NB, 3))
    tmp = np.empty(1)
    gtmp = np.empty((3, 1))
    x = np.empty(3)
    tex_idx = np.empty(4, dtype=np.int64)
    tex_w = np.empty(4)
    overflow = 0
    for r in range(n_rays):
        vx = -dirs[r, 0]
        vy = -dirs[r, 1]
        vz = -dirs[r, 2]
        trans = 1.0
        acc = np.zeros(3)
        nacc = np.zeros(3)
        dacc = 0.0
        if valid[r]:
            state = rng_seed(seed, stream, r)
            total = traverse_ray(children, lut, root_min, root_side, max_depth,
                                 origins[r], dirs[r], t_near[r], t_far[r], fp_slope[r],
                                 n_side, state, cap, False, buf_t, buf_s, buf_dt)
            if total > cap:
                overflow += 1
            m = min(total, cap)
            sh_basis(bands, vx, vy, vz, basis)
            for i in range(m):
                for a in range(3):
                    x[a] = origins[r, a] + dirs[r, a] * buf_t[i]
                gather4d(children, lut, root_min, root_side, max_depth, x, buf_s[i],
                         idx, w, dw, dx)
                eval_planes(params, border, 0, 1, idx, w, dx, NB, tmp)
                o, _ = point_opacity(tmp[0], mode, buf_dt[i])
                wi = trans * o
                if wi > 0.0:
                    eval_planes(params, border, 4, ncol, idx, w, dx, NB, coef)
                    for c in range(3):
                        v = 0.0
                        for k in range(nb2):
                            v += coef[c * nb2 + k] * basis[k]
                        acc[c] += wi * max(v, 0.0)
                    eval_planes_spatial_grad(params, border, 0, 1, idx, w, dw, dx, NB, gtmp)
                    gn = math.sqrt(gtmp[0, 0] ** 2 + gtmp[1, 0] ** 2 + gtmp[2, 0] ** 2)
                    if gn >= 1e-12:
                        for a in range(3):
                            nacc[a] -= wi * gtmp[a, 0] / gn
                    dacc += wi * buf_t[i]
                trans *= 1.0 - o
        cube_texels(res, vx, vy, vz, tex_idx, tex_w)
        for c in range(3):
            v = 0.0
            for k in range(4):
                v += tex_w[k] * flat_tex[tex_idx[k], c]
            out_rgb[r, c] = sensor_forward(acc[c] + trans * max(v, 0.0), sensor)
        alpha = 1.0 - trans
        out_opacity[r] = alpha
        out_depth[r] = dacc / max(alpha, 1e-10)
        nn = math.sqrt(nacc[0] ** 2 + nacc[1] ** 2 + nacc[2] ** 2)
        for a in range(3):
            out_normal[r, a] = nacc[a] / nn if nn > 0.0 else 0.0
    return overflow


# ---------------------------------------------------------------------------
# stochastic priors

@njit(cache=True, _nrt=False, error_model="numpy")
def huber(x, delta):
    ax = abs(x)
    if ax <= delta:
        return 0.5 * x * x
    return delta * (ax - 0.5 * delta)


@njit(cache=True, _nrt=False, error_model="numpy")
def huber_grad(x, delta):
    if x > delta:
        return delta
    if x < -delta:
        return -delta
    return x


@njit(cache=True, _nrt=False, error_model="numpy")
def _level_field(children, lut, params, border, root_min, root_side, d, x, ncol_total,
                 idx, w, dw, dx, out):
    gather_level(children, lut, root_min, root_side, d, x, 1.0, idx, w, dw, dx, 0)
    eval_planes(params, border, 0, 1, idx, w, dx, 8, out[0:1])
    eval_planes(params, border, 4, ncol_total, idx, w, dx, 8, out[1:])


@njit(cache=True, _nrt=False, error_model="numpy")
def _scatter_level(grad, touched, ncol, idx, w, dx, g):
    scatter_planes(grad, touched, 0, 1, idx, w, dx, 8, g[0:1])
    scatter_planes(grad, touched, 4, ncol, idx, w, dx, 8, g[1:])


@njit(cache=True, error_model="numpy")
def node_priors(children, lut, params, border, root_min, root_side, depth, coords,
                nodes, points, ncol, delta, scale, grad, touched, do_grad):
    """Neighbour smoothness, LoD smoothness and zero priors over a node batch.

    Every term is applied to the raw opacity and all raw SH coefficients.
    Returns the (scaled) loss; accumulates ``scale * dloss`` into ``grad``.
    """
    D = 1 + ncol
    ia = np.empty(8, dtype=np.int64)
    wa = np.empty(8)
    dwa = np.empty((8, 3))
    dxa = np.empty((8, 3))
    ib = np.empty(8, dtype=np.int64)
    wb = np.empty(8)
    dwb = np.empty((8, 3))
    dxb = np.empty((8, 3))
    fa = np.empty(D)
    fb = np.empty(D)
    ga = np.empty(D)
    gb = np.empty(D)
    centre = np.empty(3)
    other = np.empty(3)
    total = 0.0
    for b in range(nodes.shape[0]):
        j = nodes[b]
        d = depth[j]
        ell = root_side / (1 << d)
        for a in range(3):
            centre[a] = root_min[a] + (coords[j, a] + 0.5) * ell
        _level_field(children, lut, params, border, root_min, root_side, d, centre, ncol,
                     ia, wa, dwa, dxa, fa)
        # six axis-aligned neighbours on the same level
        for axis in range(3):
            for sgn in (-1.0, 1.0):
                for a in range(3):
                    other[a] = centre[a]
                other[axis] += sgn * ell
                _level_field(children, lut, params, border, root_min, root_side, d, other,
                             ncol, ib, wb, dwb, dxb, fb)
                for c in range(D):
                    diff = fa[c] - fb[c]
                    total += huber(diff, delta)
                    g = huber_grad(diff, delta) * scale
                    ga[c] = g
                    gb[c] = -g
                if do_grad:
                    _scatter_level(grad, touched, ncol, ia, wa, dxa, ga)
                    _scatter_level(grad, touched, ncol, ib, wb, dxb, gb)
        p = points[b]
        _level_field(children, lut, params, border, root_min, root_side, d, p, ncol,
                     ia, wa, dwa, dxa, fa)
        # zero attractor
        for c in range(D):
            total += huber(fa[c], delta)
            ga[c] = huber_grad(fa[c], delta) * scale
        if do_grad:
            _scatter_level(grad, touched, ncol, ia, wa, dxa, ga)
        # level-of-detail smoothness
        if children[j] >= 0:
            d2 = d + 1
        elif d > 0:
            d2 = d - 1
        else:
            d2 = -1
        if d2 >= 0:
            _level_field(children, lut, params, border, root_min, root_side, d2, p, ncol,
                         ib, wb, dwb, dxb, fb)
            for c in range(D):
                diff = fa[c] - fb[c]
                total += huber(diff, delta)
                g = huber_grad(diff, delta) * scale
                ga[c] = g
                gb[c] = -g
            if do_grad:
                _scatter_level(grad, touched, ncol, ia, wa, dxa, ga)
                _scatter_level(grad, touched, ncol, ib, wb, dxb, gb)
    return total * scale


@njit(cache=True, _nrt=False, error_model="numpy")
def texel_priors(texels, tex_ids, delta, scale, grad_tex, touched_tex, do_grad):
    """Four-neighbour smoothness (within a face) plus zero radiance per texel."""
    res = texels.shape[1]
    flat = texels.reshape(-1, 3)
    total = 0.0
    for b in range(tex_ids.shape[0]):
        k = tex_ids[b]
        face = k // (res * res)
        rem = k - face * res * res
        row = rem // res
        col = rem - row * res
        for c in range(3):
            v = flat[k, c]
            total += huber(v, delta)
            if do_grad:
                grad_tex[k, c] += huber_grad(v, delta) * scale
                touched_tex[k] = True
        for nbr in range(4):
            rr = row + (1 if nbr == 0 else (-1 if nbr == 1 else 0))
            cc = col + (1 if nbr == 2 else (-1 if nbr == 3 else 0))
            if rr < 0 or rr >= res or cc < 0 or cc >= res:
                continue
            m = face * res * res + rr * res + cc
            for c in range(3):
                diff = flat[k, c] - flat[m, c]
                total += huber(diff, delta)
                if do_grad:
                    g = huber_grad(diff, delta) * scale
                    grad_tex[k, c] += g
                    grad_tex[m, c] -= g
                    touched_tex[m] = True
    return total * scale


# ---------------------------------------------------------------------------
# structure probes

@njit(cache=True, error_model="numpy")
def max_probe_opacity(children, lut, params, border, root_min, root_side, depth, coords,
                      nodes, per_axis, mode, n_side):
    """Max constrained opacity of each node's own-level field on a regular grid.

    Exponential modes convert density with the node's stratum width side/N.
    """
    out = np.empty(nodes.shape[0])
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8)
    dw = np.empty((8, 3))
    dx = np.empty((8, 3))
    tmp = np.empty(1)
    x = np.empty(3)
    for b in range(nodes.shape[0]):
        j = nodes[b]
        d = depth[j]
        ell = root_side / (1 << d)
        step = ell / n_side
        best = 0.0
        for i in range(per_axis):
            for k in range(per_axis):
                for m in range(per_axis):
                    x[0] = root_min[0] + (coords[j, 0] + (i + 0.5) / per_axis) * ell
                    x[1] = root_min[1] + (coords[j, 1] + (k + 0.5) / per_axis) * ell
                    x[2] = root_min[2] + (coords[j, 2] + (m + 0.5) / per_axis) * ell
                    gather_level(children, lut, root_min, root_side, d, x, 1.0,
                                 idx, w, dw, dx, 0)
                    eval_planes(params, border, 0, 1, idx, w, dx, 8, tmp)
                    o, _ = point_opacity(tmp[0], mode, step)
                    if o > best:
                        best = o
        out[b] = best
    return out


@njit(cache=True, error_model="numpy")
def level_field_and_grad(children, lut, params, border, root_min, root_side, d, points, ncol):
    """Single-level field values and spatial gradients for all columns."""
    n = points.shape[0]
    vals = np.empty((n, 1 + ncol))
    grads = np.empty((n, 3, 1 + ncol))
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8)
    dw = np.empty((8, 3))
    dx = np.empty((8, 3))
    tmp = np.empty(1)
    coef = np.empty(ncol)
    g1 = np.empty((3, 1))
    gc = np.empty((3, ncol))
    for b in range(n):
        gather_level(children, lut, root_min, root_side, d, points[b], 1.0, idx, w, dw, dx, 0)
        eval_planes(params, border, 0, 1, idx, w, dx, 8, tmp)
        eval_planes(params, border, 4, ncol, idx, w, dx, 8, coef)
        eval_planes_spatial_grad(params, border, 0, 1, idx, w, dw, dx, 8, g1)
        eval_planes_spatial_grad(params, border, 4, ncol, idx, w, dw, dx, 8, gc)
        vals[b, 0] = tmp[0]
        vals[b, 1:] = coef
        grads[b, :, 0] = g1[:, 0]
        grads[b, :, 1:] = gc
    return vals, grads


# ---------------------------------------------------------------------------
# batched field queries

@njit(cache=True, error_model="numpy")
def query_field(children, lut, params, border, root_min, root_side, max_depth,
                pos, sigma, col0, ncol, out_val, out_grad, out_idx, out_w,
                out_fine, out_lod):
    w_dw = np.empty((NB, 3))
    dx = np.empty((NB, 3))
    val = np.empty(ncol)
    grd = np.empty((3, ncol))
    for q in range(pos.shape[0]):
        fine, lw = gather4d(children, lut, root_min, root_side, max_depth, pos[q], sigma[q],
                            out_idx[q], out_w[q], w_dw, dx)
        eval_planes(params, border, col0, ncol, out_idx[q], out_w[q], dx, NB, val)
        eval_planes_spatial_grad(params, border, col0, ncol, out_idx[q], out_w[q],
                                 w_dw, dx, NB, grd)
        out_val[q] = val
        out_grad[q] = grd
        out_fine[q] = fine
        out_lod[q] = lw


# ---------------------------------------------------------------------------
# optimiser

@njit(cache=True, _nrt=False, error_model="numpy")
def adam_rows(params, m, v, rows, grads, lr, beta1, beta2, eps, step):
    """Bias-corrected Adam on selected rows of a 2D parameter block; entries
    with a zero gradient are left untouched (moments included)."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for k in range(rows.shape[0]):
        r = rows[k]
        for j in range(grads.shape[1]):
            g = grads[k, j]
            if g == 0.0:
                continue
            mj = beta1 * m[r, j] + (1.0 - beta1) * g
            vj = beta2 * v[r, j] + (1.0 - beta2) * g * g
            m[r, j] = mj
            v[r, j] = vj
            params[r, j] = params[r, j] - lr * (mj / c1) / (math.sqrt(vj / c2) + eps)
