"""Tile-based CPU rasterizer for 3D Gaussians: EWA projection, front-to-back
alpha blending of color and depth, and the analytic backward pass to every
Gaussian attribute.

Forward pipeline per view:
  world Gaussian -> camera space -> perspective mean + first-order (EWA)
  covariance projection -> depth sort -> 16x16 tile binning -> per-pixel
  alpha blend with early termination.

The backward pass consumes per-pixel gradients of blended color, raw blended
depth, alpha-normalized depth and accumulated alpha, and returns gradients in
the original parameterization (position, raw quaternion, log-scale, opacity
logit, SH coefficients).  Both directions share one code path parameterized by
dtype; float64 is used for finite-difference verification, float32 for speed.

Blending at one pixel follows, for depth-sorted contributors i:

    C = sum_i c_i * a_i * T_i,   T_i = prod_{j<i} (1 - a_j)

with a_i = min(base_i * exp(-0.5 * d^T cov2d^-1 d), 0.99).  Accumulation is
cut off once T drops below `stop_transmittance`, and contributions with raw
alpha below `alpha_cutoff` are skipped.  The cutoff test is pixel-local, so
the rendered image is independent of the tile layout; tiles are purely a
traversal accelerator.  `alpha_cutoff` is small enough (1e-12) that the
truncation is far below float32 resolution, which keeps the renderer within
1e-6 of a direct evaluation of the blend sums and keeps finite-difference
gradient checks clean.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import MissingIntermediatesError, RenderError, ValidationError
from .scene import (
    eval_sh_basis,
    eval_sh_basis_grad,
    normalize_quaternion,
    quat_to_rotmat,
    rotmat_grad_wrt_quat,
    sh_coeff_count,
)


@dataclass
class RenderSettings:
    tile_size: int = 16
    near: float = 0.01                 # camera-space depth at or below this is culled
    lowpass: float = 0.3               # screen-space covariance dilation
    alpha_clamp: float = 0.99
    stop_transmittance: float = 1e-4
    alpha_cutoff: float = 1e-12        # per-pixel contribution floor
    threads: int = 1


# Depth-ordered candidates are alpha-evaluated this many at a time so a tile
# can bail out early instead of touching every binned gaussian.
_CHUNK = 32


@dataclass
class ProjectedGaussian:
    index: int                 # index into the source cloud
    mean2d: np.ndarray         # (2,) pixel coordinates
    cov2d: np.ndarray          # (2, 2) screen-space covariance (lowpass added)
    depth: float               # camera-space z
    color: np.ndarray          # (3,) view-dependent RGB, clamped >= 0
    opacity: float             # activated base opacity in (0, 1)
    radius: float              # conservative pixel footprint radius


class _Projection:
    """Arrays over the active (visible, depth-sorted) subset."""

    __slots__ = (
        "act", "z", "mean2d", "cov2d", "lam", "Mmat", "Sigma3", "Rq", "qhat",
        "qnorm", "s", "base", "colors", "colorpre", "viewdir", "rlen", "basis",
        "radius", "mcam", "sh_act",
    )


class RenderContext:
    """Forward intermediates retained for the backward pass."""

    def __init__(self, proj, tiles, settings, view, dtype, n_total, sh_degree,
                 blend_unclamped, depth_raw, accum):
        self.proj = proj
        self.tiles = tiles          # list of (tile_y, tile_x, cand, alpha_raw)
        self.settings = settings
        self.view = view
        self.dtype = dtype
        self.n_total = n_total
        self.sh_degree = sh_degree
        self.blend_unclamped = blend_unclamped
        self.depth_raw = depth_raw
        self.accum = accum


@dataclass
class RenderOutput:
    color: np.ndarray           # (H, W, 3) in [0, 1]
    depth: np.ndarray           # (H, W) raw alpha-weighted depth sum
    depth_norm: np.ndarray      # (H, W) depth / accum where accum > 0, else 0
    accum_alpha: np.ndarray     # (H, W)
    transmittance: np.ndarray   # (H, W) residual transmittance after blending
    ctx: Optional[RenderContext] = None


@dataclass
class RenderGradients:
    positions: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4) w.r.t. the raw (unnormalized) quaternion
    log_scales: np.ndarray      # (N, 3)
    opacities: np.ndarray       # (N,) w.r.t. the opacity logit
    sh: np.ndarray              # (N, K, 3)
    mean2d_norm: np.ndarray     # (N,) view-space positional gradient magnitude
    visible: np.ndarray = None  # (N,) bool, True if the Gaussian reached the screen

    def cloud_grads(self):
        return {"positions": self.positions, "rotations": self.rotations,
                "log_scales": self.log_scales, "opacities": self.opacities,
                "sh": self.sh}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_finite(cloud):
    if len(cloud) == 0:
        return
    for name, arr in cloud.params().items():
        flat_ok = np.isfinite(arr).reshape(len(arr), -1).all(axis=1)
        if not flat_ok.all():
            bad = int(np.nonzero(~flat_ok)[0][0])
            raise RenderError(f"primitive {bad} has non-finite {name}", index=bad,
                              field=name)


def blend_pixel(contributors, alpha_clamp=0.99, stop_transmittance=1e-4):
    """Reference front-to-back blend of one pixel.

    contributors: iterable of (color (3,), alpha, depth), already depth-sorted.
    Returns (color (3,), raw blended depth, accumulated alpha).
    """
    color = np.zeros(3)
    depth = 0.0
    accum = 0.0
    T = 1.0
    for c, a, d in contributors:
        if T < stop_transmittance:
            break
        a = min(float(a), alpha_clamp)
        w = a * T
        color = color + w * np.asarray(c, dtype=float)
        depth += w * float(d)
        accum += w
        T *= 1.0 - a
    return color, depth, accum


def _project_arrays(cloud, view, settings, dtype):
    """Cull, project and depth-sort the cloud; returns a _Projection or None."""
    n = len(cloud)
    if n == 0:
        return None
    pos = cloud.positions.astype(dtype)
    rot = cloud.rotations.astype(dtype)
    logs = cloud.log_scales.astype(dtype)
    opa = cloud.opacities.astype(dtype)
    sh = cloud.sh.astype(dtype)

    Rcw = view.rotation.astype(dtype)
    tcw = view.translation.astype(dtype)
    mcam = pos @ Rcw.T + tcw                      # (N, 3) camera-space means
    z = mcam[:, 2]
    keep = z > settings.near
    if not keep.any():
        return None

    idx = np.nonzero(keep)[0]
    order = np.argsort(z[idx], kind="stable")     # ascending depth, index tie-break
    act = idx[order]

    p = _Projection()
    p.act = act
    p.mcam = mcam[act]
    p.z = z[act]
    mx, my, mz = p.mcam[:, 0], p.mcam[:, 1], p.mcam[:, 2]
    fx = dtype(view.fx)
    fy = dtype(view.fy)
    p.mean2d = np.stack([fx * mx / mz + dtype(view.cx),
                         fy * my / mz + dtype(view.cy)], axis=1)

    # EWA: cov2d = J W Sigma W^T J^T + lowpass * I, J the projective Jacobian.
    qhat = normalize_quaternion(rot[act])
    p.qhat = qhat
    p.qnorm = np.linalg.norm(rot[act], axis=1)
    p.Rq = quat_to_rotmat(qhat)
    p.s = np.exp(logs[act])
    Sigma3 = np.einsum("aik,ak,ajk->aij", p.Rq, p.s * p.s, p.Rq)
    p.Sigma3 = Sigma3
    J = np.zeros((len(act), 2, 3), dtype=dtype)
    J[:, 0, 0] = fx / mz
    J[:, 0, 2] = -fx * mx / (mz * mz)
    J[:, 1, 1] = fy / mz
    J[:, 1, 2] = -fy * my / (mz * mz)
    Mmat = J @ Rcw                                 # (A, 2, 3)
    p.Mmat = Mmat
    cov2d = np.einsum("aik,akl,ajl->aij", Mmat, Sigma3, Mmat)
    cov2d[:, 0, 0] += dtype(settings.lowpass)
    cov2d[:, 1, 1] += dtype(settings.lowpass)
    p.cov2d = cov2d

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam = np.empty_like(cov2d)
    lam[:, 0, 0] = cov2d[:, 1, 1] / det
    lam[:, 1, 1] = cov2d[:, 0, 0] / det
    lam[:, 0, 1] = lam[:, 1, 0] = -cov2d[:, 0, 1] / det
    p.lam = lam

    p.base = _sigmoid(opa[act])

    cam_center = view.camera_center.astype(dtype)
    dvec = pos[act] - cam_center
    p.rlen = np.linalg.norm(dvec, axis=1)
    p.viewdir = dvec / p.rlen[:, None]
    p.basis = eval_sh_basis(p.viewdir, cloud.sh_degree)          # (A, K)
    p.sh_act = sh[act]
    p.colorpre = np.einsum("ak,akc->ac", p.basis, p.sh_act) + dtype(0.5)
    p.colors = np.maximum(p.colorpre, 0.0)

    # Footprint radius from the largest eigenvalue and the alpha cutoff:
    # base * exp(-q/2) > cutoff  =>  q < 2 log(base / cutoff).
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2
                              + cov2d[:, 0, 1] ** 2, 0.0))
    lam_max = mid + disc
    qmax = 2.0 * np.log(np.maximum(p.base / dtype(settings.alpha_cutoff), 1.0))
    p.radius = np.sqrt(np.maximum(qmax * lam_max, 0.0))
    return p


def _bin_tiles(p, width, height, tile_size):
    """Per-tile candidate lists (positions into the active arrays, depth order)."""
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    ntiles = ntx * nty
    u = p.mean2d[:, 0]
    v = p.mean2d[:, 1]
    r = p.radius
    x0 = np.clip(np.floor((u - r) / tile_size).astype(np.int64), 0, ntx - 1)
    x1 = np.clip(np.floor((u + r) / tile_size).astype(np.int64), 0, ntx - 1)
    y0 = np.clip(np.floor((v - r) / tile_size).astype(np.int64), 0, nty - 1)
    y1 = np.clip(np.floor((v + r) / tile_size).astype(np.int64), 0, nty - 1)
    inside = (u + r >= 0) & (u - r < width) & (v + r >= 0) & (v - r < height) & (r > 0)
    a = np.nonzero(inside)[0]

    # Expand every gaussian over its tile bounding box without a python loop:
    # enumerate (gaussian, tile) pairs, then a stable sort on tile id keeps the
    # within-tile ordering ascending in `a`, i.e. the global depth order.
    nx = x1[a] - x0[a] + 1
    ny = y1[a] - y0[a] + 1
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return ntx, nty, [a[:0]] * ntiles
    rep = np.repeat(np.arange(len(a)), counts)
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(offs, counts)
    nx_rep = np.repeat(nx, counts)
    tix = x0[a][rep] + within % nx_rep
    tiy = y0[a][rep] + within // nx_rep
    tid = tiy * ntx + tix
    order = np.argsort(tid, kind="stable")
    gpos = a[rep][order]
    bounds = np.searchsorted(tid[order], np.arange(ntiles + 1))
    return ntx, nty, [gpos[bounds[t]:bounds[t + 1]] for t in range(ntiles)]


def _tile_pixels(tx, ty, width, height, tile_size, dtype):
    px0 = tx * tile_size
    py0 = ty * tile_size
    px1 = min(px0 + tile_size, width)
    py1 = min(py0 + tile_size, height)
    xs = np.arange(px0, px1, dtype=dtype) + dtype(0.5)
    ys = np.arange(py0, py1, dtype=dtype) + dtype(0.5)
    return px0, py0, px1, py1, xs, ys


def _tile_alpha(p, cand, xs, ys, settings, dtype, grid=None):
    """Raw per-pixel alphas for one tile: (P, M) with P = len(ys)*len(xs)."""
    u = p.mean2d[cand, 0]
    v = p.mean2d[cand, 1]
    if grid is None:
        gx = np.repeat(ys, len(xs))     # row-major pixel order
        gxx = np.tile(xs, len(ys))
    else:
        gxx, gx = grid
    d0 = gxx[:, None] - u[None, :]
    d1 = gx[:, None] - v[None, :]
    l00 = p.lam[cand, 0, 0]
    l01 = p.lam[cand, 0, 1]
    l11 = p.lam[cand, 1, 1]
    q = l00 * d0 * d0 + 2.0 * l01 * d0 * d1 + l11 * d1 * d1
    araw = p.base[cand] * np.exp(dtype(-0.5) * q)
    return araw, d0, d1


def _blend_arrays(araw, settings, dtype):
    """From raw alphas (P, M) to effective alphas, transmittances and weights."""
    aeff = np.where(araw > settings.alpha_cutoff,
                    np.minimum(araw, dtype(settings.alpha_clamp)), dtype(0.0))
    one_m = 1.0 - aeff
    T_incl = np.cumprod(one_m, axis=1)
    T = np.empty_like(T_incl)
    T[:, 0] = 1.0
    T[:, 1:] = T_incl[:, :-1]
    live = T >= settings.stop_transmittance
    w = aeff * T * live
    return aeff, one_m, T, live, w


def render(cloud, view, dtype=np.float32, settings=None, save_ctx=False):
    """Rasterize the cloud into color, depth and accumulation maps."""
    settings = settings or RenderSettings()
    dtype = np.dtype(dtype).type
    _check_finite(cloud)
    H, W = view.height, view.width
    color = np.zeros((H, W, 3), dtype=dtype)
    depth_raw = np.zeros((H, W), dtype=dtype)
    accum = np.zeros((H, W), dtype=dtype)
    trans = np.ones((H, W), dtype=dtype)

    p = _project_arrays(cloud, view, settings, dtype)
    if p is None:
        out = RenderOutput(color, depth_raw, depth_raw.copy(), accum, trans)
        if save_ctx:
            out.ctx = RenderContext(None, [], settings, view, dtype, len(cloud),
                                    cloud.sh_degree, color.copy(), depth_raw, accum)
        return out

    ntx, nty, tiles = _bin_tiles(p, W, H, settings.tile_size)
    saved_tiles = []

    def do_tile(t):
        cand = tiles[t]
        if len(cand) == 0:
            return None
        ty, tx = divmod(t, ntx)
        px0, py0, px1, py1, xs, ys = _tile_pixels(tx, ty, W, H, settings.tile_size, dtype)
        shape = (py1 - py0, px1 - px0)
        npx = shape[0] * shape[1]
        stop = settings.stop_transmittance
        gxx = np.tile(xs, len(ys))          # row-major pixel order
        gx = np.repeat(ys, len(xs))
        # Accumulate candidates strictly front to back.  A candidate whose
        # weight is zero at a pixel (alpha cutoff / early stop) then adds
        # exactly 0.0 and multiplies by exactly 1.0, so the result is
        # bit-identical no matter how many such candidates the tile layout
        # includes -- the per-pixel image does not depend on the tiling.
        # Candidates are evaluated in depth-ordered chunks; once every pixel
        # has stopped the remaining tail is dropped, and pixels that stop are
        # withdrawn from the working set (their rows would only ever receive
        # exact zeros).  cumsum/cumprod evaluate the identical one-element-at-
        # a-time recurrence a sequential loop would, so seeding them with the
        # running totals continues the accumulation bit for bit across chunks.
        # When intermediates are kept for the backward pass every pixel stays
        # resident so the stored alpha maps cover the whole tile; the blended
        # outputs are bit-identical either way.
        acc5 = np.zeros((npx, 5), dtype=dtype)
        tfin = np.ones(npx, dtype=dtype)
        alive = np.arange(npx)
        T_al = np.ones(npx, dtype=dtype)
        araw_parts = []
        used = 0
        for c0 in range(0, len(cand), _CHUNK):
            chunk = cand[c0:c0 + _CHUNK]
            m = len(chunk)
            used = c0 + m
            # (m, P_alive) quadratic forms; rows contiguous so the prefix
            # scans below stream along the candidate axis.
            d0 = gxx[None, :] - p.mean2d[chunk, 0][:, None]
            d1 = gx[None, :] - p.mean2d[chunk, 1][:, None]
            l00 = p.lam[chunk, 0, 0][:, None]
            l01 = p.lam[chunk, 0, 1][:, None]
            l11 = p.lam[chunk, 1, 1][:, None]
            q = l00 * d0 * d0 + 2.0 * l01 * d0 * d1 + l11 * d1 * d1
            araw = p.base[chunk][:, None] * np.exp(dtype(-0.5) * q)
            if save_ctx:
                araw_parts.append(araw)
            aeff = np.where(araw > settings.alpha_cutoff,
                            np.minimum(araw, dtype(settings.alpha_clamp)), dtype(0.0))
            one_m = 1.0 - aeff
            Tc = np.cumprod(np.concatenate([T_al[None, :], one_m], axis=0), axis=0)
            T = Tc[:-1]
            live = T >= stop
            w = aeff * T * live
            payload = np.concatenate([p.colors[chunk], p.z[chunk, None],
                                      np.ones((m, 1), dtype=dtype)], axis=1)
            wp = (w[:, :, None] * payload[:, None, :]).reshape(m, -1)
            seg = np.concatenate([acc5[alive].reshape(1, -1), wp], axis=0)
            acc5[alive] = np.cumsum(seg, axis=0)[-1].reshape(-1, 5)
            fac = np.where(live, one_m, dtype(1.0))
            tfin[alive] = np.cumprod(
                np.concatenate([tfin[alive][None, :], fac], axis=0), axis=0)[-1]
            T_al = Tc[-1]
            if save_ctx:
                if T_al.max() < stop:
                    break
            else:
                keep = T_al >= stop
                if not keep.all():
                    alive = alive[keep]
                    if len(alive) == 0:
                        break
                    T_al = T_al[keep]
                    gxx = gxx[keep]
                    gx = gx[keep]
        col = acc5[:, 0:3].reshape(shape + (3,))
        dep = acc5[:, 3].reshape(shape)
        acc = acc5[:, 4].reshape(shape)
        tfin = tfin.reshape(shape)
        cand = cand[:used]
        araw = np.concatenate(araw_parts, axis=0).T if araw_parts else None
        return t, px0, py0, px1, py1, col, dep, acc, tfin, cand, araw

    results = _run_tiles(do_tile, len(tiles), settings.threads)
    for res in results:
        if res is None:
            continue
        t, px0, py0, px1, py1, col, dep, acc, tfin, cand, araw = res
        color[py0:py1, px0:px1] += col
        depth_raw[py0:py1, px0:px1] += dep
        accum[py0:py1, px0:px1] += acc
        trans[py0:py1, px0:px1] = tfin
        if save_ctx:
            saved_tiles.append((t, cand, araw))

    blend_unclamped = color.copy()
    np.minimum(color, dtype(1.0), out=color)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth_norm = np.where(accum > 0, depth_raw / np.where(accum > 0, accum, 1), 0)
    depth_norm = depth_norm.astype(dtype)

    out = RenderOutput(color, depth_raw, depth_norm, accum, trans)
    if save_ctx:
        out.ctx = RenderContext(p, saved_tiles, settings, view, dtype, len(cloud),
                                cloud.sh_degree, blend_unclamped, depth_raw, accum)
    return out


def _run_tiles(fn, n, threads):
    """Run per-tile work; results always consumed in tile order."""
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(t) for t in range(n)]


def project(cloud, view, settings=None, dtype=np.float64):
    """Project the cloud for one view; returns depth-sorted ProjectedGaussians."""
    settings = settings or RenderSettings()
    dtype = np.dtype(dtype).type
    _check_finite(cloud)
    p = _project_arrays(cloud, view, settings, dtype)
    if p is None:
        return []
    return [
        ProjectedGaussian(int(p.act[a]), p.mean2d[a].copy(), p.cov2d[a].copy(),
                          float(p.z[a]), p.colors[a].copy(), float(p.base[a]),
                          float(p.radius[a]))
        for a in range(len(p.act))
    ]


def render_backward(ctx, grad_color=None, grad_depth=None, grad_depth_norm=None,
                    grad_accum=None):
    """Backpropagate per-pixel gradients to all Gaussian attributes.

    ctx: RenderContext from render(..., save_ctx=True).
    grad_color: (H, W, 3); grad_depth: (H, W) w.r.t. the raw depth sum;
    grad_depth_norm: (H, W) w.r.t. alpha-normalized depth; grad_accum: (H, W).
    """
    if ctx is None or not isinstance(ctx, RenderContext):
        raise MissingIntermediatesError(
            "backward requires forward intermediates; call render(save_ctx=True)")
    view = ctx.view
    settings = ctx.settings
    dtype = ctx.dtype
    H, W = view.height, view.width
    K = sh_coeff_count(ctx.sh_degree)
    N = ctx.n_total

    grads = RenderGradients(
        positions=np.zeros((N, 3), dtype=dtype),
        rotations=np.zeros((N, 4), dtype=dtype),
        log_scales=np.zeros((N, 3), dtype=dtype),
        opacities=np.zeros((N,), dtype=dtype),
        sh=np.zeros((N, K, 3), dtype=dtype),
        mean2d_norm=np.zeros((N,), dtype=dtype),
        visible=np.zeros((N,), dtype=bool),
    )
    p = ctx.proj
    if p is None:
        return grads

    gC = np.zeros((H, W, 3), dtype=dtype) if grad_color is None \
        else np.asarray(grad_color, dtype=dtype).copy()
    # Final color clamp: zero gradient where the unclamped blend exceeded 1.
    gC[ctx.blend_unclamped >= 1.0] = 0.0
    gD = np.zeros((H, W), dtype=dtype)
    if grad_depth is not None:
        gD += np.asarray(grad_depth, dtype=dtype)
    gA = np.zeros((H, W), dtype=dtype)
    if grad_accum is not None:
        gA += np.asarray(grad_accum, dtype=dtype)
    if grad_depth_norm is not None:
        gn = np.asarray(grad_depth_norm, dtype=dtype)
        pos_mask = ctx.accum > 0
        safe = np.where(pos_mask, ctx.accum, 1)
        gD += np.where(pos_mask, gn / safe, 0)
        gA += np.where(pos_mask, -gn * ctx.depth_raw / (safe * safe), 0)

    A = len(p.act)
    acc_mean2d = np.zeros((A, 2), dtype=dtype)
    acc_cov = np.zeros((A, 2, 2), dtype=dtype)
    acc_base = np.zeros((A,), dtype=dtype)
    acc_color = np.zeros((A, 3), dtype=dtype)
    acc_z = np.zeros((A,), dtype=dtype)

    ntx = (W + settings.tile_size - 1) // settings.tile_size

    def do_tile(item):
        t, cand, araw = item
        ty, tx = divmod(t, ntx)
        px0, py0, px1, py1, xs, ys = _tile_pixels(tx, ty, W, H, settings.tile_size, dtype)
        _, one_m, T, live, w = _blend_arrays(araw, settings, dtype)
        shape_p = (py1 - py0) * (px1 - px0)
        tgC = gC[py0:py1, px0:px1].reshape(shape_p, 3)
        tgD = gD[py0:py1, px0:px1].reshape(shape_p)
        tgA = gA[py0:py1, px0:px1].reshape(shape_p)

        # u_pm: dL/d(contribution weight) of each contributor at each pixel.
        u_pm = tgC @ p.colors[cand].T + tgD[:, None] * p.z[cand][None, :] + tgA[:, None]
        wu = w * u_pm
        rev = np.cumsum(wu[:, ::-1], axis=1)
        S = (rev - wu[:, ::-1])[:, ::-1]          # suffix sums over later contributors
        d_aeff = live * T * u_pm - S / one_m
        pass_mask = (araw > settings.alpha_cutoff) & (araw < settings.alpha_clamp)
        d_araw = np.where(pass_mask, d_aeff, dtype(0.0))

        d_base = (d_araw * (araw / p.base[cand][None, :])).sum(axis=0)
        dq = dtype(-0.5) * araw * d_araw

        u = p.mean2d[cand, 0]
        v = p.mean2d[cand, 1]
        gy = np.repeat(ys, len(xs))
        gx = np.tile(xs, len(ys))
        d0 = gx[:, None] - u[None, :]
        d1 = gy[:, None] - v[None, :]
        l00 = p.lam[cand, 0, 0]
        l01 = p.lam[cand, 0, 1]
        l11 = p.lam[cand, 1, 1]
        dd0 = dq * 2.0 * (l00 * d0 + l01 * d1)    # dL/d(delta_x)
        dd1 = dq * 2.0 * (l01 * d0 + l11 * d1)
        d_mean = np.stack([-dd0.sum(axis=0), -dd1.sum(axis=0)], axis=1)
        g00 = (dq * d0 * d0).sum(axis=0)
        g01 = (dq * d0 * d1).sum(axis=0)
        g11 = (dq * d1 * d1).sum(axis=0)
        d_col = w.T @ tgC
        d_z = w.T @ tgD
        return cand, d_base, d_mean, g00, g01, g11, d_col, d_z

    results = _run_tiles(lambda i: do_tile(ctx.tiles[i]), len(ctx.tiles), settings.threads)
    gLam = np.zeros((A, 2, 2), dtype=dtype)
    for res in results:
        cand, d_base, d_mean, g00, g01, g11, d_col, d_z = res
        np.add.at(acc_base, cand, d_base)
        np.add.at(acc_mean2d, cand, d_mean)
        np.add.at(gLam, (cand, 0, 0), g00)
        np.add.at(gLam, (cand, 0, 1), g01)
        np.add.at(gLam, (cand, 1, 0), g01)
        np.add.at(gLam, (cand, 1, 1), g11)
        np.add.at(acc_color, cand, d_col)
        np.add.at(acc_z, cand, d_z)

    # q = d^T Lam d with Lam = cov2d^-1: dL/dcov2d = -Lam (dL/dLam) Lam.
    # gLam was accumulated with the off-diagonal split symmetrically, matching
    # the full-matrix convention dq/dLam = d d^T.
    acc_cov = -np.einsum("aik,akl,alj->aij", p.lam, 0.5 * (gLam + np.swapaxes(gLam, 1, 2)),
                         p.lam)

    # --- chain through projection, covariance and color ---
    fx = dtype(view.fx)
    fy = dtype(view.fy)
    Rcw = view.rotation.astype(dtype)
    mx, my, mz = p.mcam[:, 0], p.mcam[:, 1], p.mcam[:, 2]

    GG = acc_cov + np.swapaxes(acc_cov, 1, 2)
    dSigma = np.einsum("aki,akl,alj->aij", p.Mmat, acc_cov, p.Mmat)
    dMmat = GG @ p.Mmat @ p.Sigma3
    dJ = dMmat @ Rcw.T

    dm = np.zeros((A, 3), dtype=dtype)
    inv_z = 1.0 / mz
    inv_z2 = inv_z * inv_z
    dm[:, 0] = dJ[:, 0, 2] * (-fx * inv_z2)
    dm[:, 1] = dJ[:, 1, 2] * (-fy * inv_z2)
    dm[:, 2] = (dJ[:, 0, 0] * (-fx * inv_z2) + dJ[:, 1, 1] * (-fy * inv_z2)
                + dJ[:, 0, 2] * (2.0 * fx * mx * inv_z2 * inv_z)
                + dJ[:, 1, 2] * (2.0 * fy * my * inv_z2 * inv_z))
    gu = acc_mean2d[:, 0]
    gv = acc_mean2d[:, 1]
    dm[:, 0] += gu * fx * inv_z
    dm[:, 1] += gv * fy * inv_z
    dm[:, 2] += -(gu * fx * mx + gv * fy * my) * inv_z2
    dm[:, 2] += acc_z

    dpos = dm @ Rcw

    # SH color: gradient to coefficients and, through the view direction, to position.
    clamp_mask = (p.colorpre > 0).astype(dtype)
    d_colorpre = acc_color * clamp_mask
    dsh_act = np.einsum("ak,ac->akc", p.basis, d_colorpre)
    basis_grad = eval_sh_basis_grad(p.viewdir, ctx.sh_degree)      # (A, K, 3)
    ddir = np.einsum("ac,akc,akd->ad", d_colorpre, p.sh_act, basis_grad)
    ddir_t = (ddir - p.viewdir * np.sum(ddir * p.viewdir, axis=1, keepdims=True))
    dpos += ddir_t / p.rlen[:, None]

    # Sigma = R diag(s^2) R^T.
    G3 = dSigma
    GG3 = G3 + np.swapaxes(G3, 1, 2)
    dR = (GG3 @ p.Rq) * (p.s * p.s)[:, None, :]
    ds2 = np.einsum("aki,akl,ali->ai", p.Rq, G3, p.Rq)
    dlogs = 2.0 * (p.s * p.s) * ds2
    gradR = rotmat_grad_wrt_quat(p.qhat)                            # (A, 4, 3, 3)
    dqhat = np.einsum("aij,apij->ap", dR, gradR)
    dqraw = (dqhat - p.qhat * np.sum(dqhat * p.qhat, axis=1, keepdims=True)) \
        / p.qnorm[:, None]

    dopa = acc_base * p.base * (1.0 - p.base)

    act = p.act
    grads.positions[act] = dpos
    grads.rotations[act] = dqraw
    grads.log_scales[act] = dlogs
    grads.opacities[act] = dopa
    grads.sh[act] = dsh_act
    grads.mean2d_norm[act] = np.linalg.norm(acc_mean2d, axis=1)
    grads.visible[act] = p.radius > 0
    return grads
