"""Time-conditioned deformation of the canonical Gaussians.

A compact spatio-temporal encoder maps (position, timestamp) to a feature
vector: six axis-aligned feature planes per resolution level (XY, XZ, YZ and
XT, YT, ZT), each sampled bilinearly.  Every spatial plane is multiplied
element-wise with the spatio-temporal plane covering the two remaining axes
(XY*ZT + XZ*YT + YZ*XT) and the three products are summed; levels are
concatenated.  A small ReLU MLP with three zero-initialized output heads then
decodes position, rotation and log-scale offsets, so the field starts as the
exact identity and only the deformed position/rotation/scale change --
opacity and color coefficients are passed through untouched.

Gradients flow to the plane features, the MLP weights, and (through the
encoding) back to the canonical positions.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .scene import GaussianCloud

# (spatial plane, matching spatio-temporal plane); axes 0=x, 1=y, 2=z, 3=t.
PLANE_PAIRS = (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((1, 2), (0, 3)))
PLANE_KEYS = tuple(k for pair in PLANE_PAIRS for k in pair)


def _bilinear(F, u, v):
    """Sample plane F (R0, R1, h) at continuous grid coords u, v (N,).

    Returns (value (N, h), cache) where cache holds everything the backward
    scatter and the coordinate derivative need.
    """
    r0, r1 = F.shape[0], F.shape[1]
    i0 = np.clip(np.floor(u).astype(int), 0, r0 - 2)
    j0 = np.clip(np.floor(v).astype(int), 0, r1 - 2)
    fu = (u - i0)[:, None]
    fv = (v - j0)[:, None]
    f00 = F[i0, j0]
    f10 = F[i0 + 1, j0]
    f01 = F[i0, j0 + 1]
    f11 = F[i0 + 1, j0 + 1]
    val = ((1 - fu) * (1 - fv) * f00 + fu * (1 - fv) * f10
           + (1 - fu) * fv * f01 + fu * fv * f11)
    return val, (i0, j0, fu, fv, f00, f10, f01, f11)


def _bilinear_backward(F_grad, cache, gval):
    """Scatter dL/dvalue into the plane and return (dL/du, dL/dv)."""
    i0, j0, fu, fv, f00, f10, f01, f11 = cache
    np.add.at(F_grad, (i0, j0), (1 - fu) * (1 - fv) * gval)
    np.add.at(F_grad, (i0 + 1, j0), fu * (1 - fv) * gval)
    np.add.at(F_grad, (i0, j0 + 1), (1 - fu) * fv * gval)
    np.add.at(F_grad, (i0 + 1, j0 + 1), fu * fv * gval)
    dval_du = (1 - fv) * (f10 - f00) + fv * (f11 - f01)
    dval_dv = (1 - fu) * (f01 - f00) + fu * (f11 - f10)
    gu = np.sum(gval * dval_du, axis=1)
    gv = np.sum(gval * dval_dv, axis=1)
    return gu, gv


class EncodingField:
    """Multi-resolution six-plane grid over (x, y, z, t) in [0,1]^4."""

    def __init__(self, bounds_lo, bounds_hi, n_levels=2, base_resolution=32,
                 features_per_level=16, init_scale=0.1, seed=0, dtype=np.float64):
        self.bounds_lo = np.asarray(bounds_lo, dtype=float)
        self.bounds_hi = np.asarray(bounds_hi, dtype=float)
        if np.any(self.bounds_hi <= self.bounds_lo):
            raise ValidationError("field bounds must satisfy hi > lo per axis")
        self.n_levels = n_levels
        self.base_resolution = base_resolution
        self.features_per_level = features_per_level
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.levels = []
        for lvl in range(n_levels):
            res = base_resolution * (2 ** lvl)
            planes = {}
            for key in PLANE_KEYS:
                planes[key] = rng.normal(0.0, init_scale,
                                         (res, res, features_per_level)).astype(self.dtype)
            self.levels.append(planes)

    @property
    def latent_dim(self):
        return self.n_levels * self.features_per_level

    def params(self):
        out = {}
        for lvl, planes in enumerate(self.levels):
            for key, arr in planes.items():
                out[f"plane_l{lvl}_{key[0]}{key[1]}"] = arr
        return out

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.params().items()}

    def normalized_coords(self, positions, tau):
        """Map world positions + timestamp into [0,1]^4 with clamping."""
        positions = np.asarray(positions)
        span = (self.bounds_hi - self.bounds_lo).astype(positions.dtype)
        n = (positions - self.bounds_lo.astype(positions.dtype)) / span
        clamp_mask = (n > 0) & (n < 1)          # zero positional gradient once clamped
        n = np.clip(n, 0.0, 1.0)
        t = np.full(len(positions), tau, dtype=positions.dtype)
        coords = np.concatenate([n, t[:, None]], axis=1)   # (N, 4)
        return coords, clamp_mask, span

    def encode(self, positions, tau):
        """(N, 3) positions + scalar tau -> (latent (N, latent_dim), ctx)."""
        coords, clamp_mask, span = self.normalized_coords(positions, tau)
        n = len(coords)
        latent = np.zeros((n, self.latent_dim), dtype=coords.dtype)
        caches = []
        for lvl, planes in enumerate(self.levels):
            res = self.base_resolution * (2 ** lvl)
            lvl_caches = []
            acc = np.zeros((n, self.features_per_level), dtype=coords.dtype)
            for sp_key, st_key in PLANE_PAIRS:
                us = coords[:, sp_key[0]] * (res - 1)
                vs = coords[:, sp_key[1]] * (res - 1)
                ut = coords[:, st_key[0]] * (res - 1)
                vt = coords[:, st_key[1]] * (res - 1)
                Bs, cs = _bilinear(planes[sp_key].astype(coords.dtype, copy=False), us, vs)
                Bt, ct = _bilinear(planes[st_key].astype(coords.dtype, copy=False), ut, vt)
                acc += Bs * Bt
                lvl_caches.append((sp_key, st_key, cs, ct, Bs, Bt))
            latent[:, lvl * self.features_per_level:(lvl + 1) * self.features_per_level] = acc
            caches.append(lvl_caches)
        ctx = (caches, clamp_mask, span)
        return latent, ctx

    def encode_backward(self, ctx, glatent):
        """dL/dlatent -> (plane grads dict, dL/dpositions (N, 3))."""
        caches, clamp_mask, span = ctx
        grads = self.zero_grads()
        gpos = np.zeros((glatent.shape[0], 3), dtype=glatent.dtype)
        for lvl, lvl_caches in enumerate(caches):
            res = self.base_resolution * (2 ** lvl)
            g = glatent[:, lvl * self.features_per_level:(lvl + 1) * self.features_per_level]
            for sp_key, st_key, cs, ct, Bs, Bt in lvl_caches:
                gu, gv = _bilinear_backward(grads[f"plane_l{lvl}_{sp_key[0]}{sp_key[1]}"],
                                            cs, g * Bt)
                for axis, gcoord in ((sp_key[0], gu), (sp_key[1], gv)):
                    gpos[:, axis] += gcoord * (res - 1) / span[axis] * clamp_mask[:, axis]
                gu, gv = _bilinear_backward(grads[f"plane_l{lvl}_{st_key[0]}{st_key[1]}"],
                                            ct, g * Bs)
                # first axis of a spatio-temporal plane is spatial, second is time
                gpos[:, st_key[0]] += gu * (res - 1) / span[st_key[0]] * clamp_mask[:, st_key[0]]
        return grads, gpos


class DeformationHead:
    """Two-hidden-layer ReLU MLP with zero-initialized offset heads."""

    HIDDEN = 64

    def __init__(self, latent_dim, seed=0, dtype=np.float64):
        self.latent_dim = latent_dim
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        h = self.HIDDEN

        def lin(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            return (rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype),
                    rng.uniform(-bound, bound, fan_out).astype(self.dtype))

        self.W1, self.b1 = lin(latent_dim, h)
        self.W2, self.b2 = lin(h, h)
        self.Wp = np.zeros((h, 3), dtype=self.dtype)
        self.bp = np.zeros(3, dtype=self.dtype)
        self.Wr = np.zeros((h, 4), dtype=self.dtype)
        self.br = np.zeros(4, dtype=self.dtype)
        self.Ws = np.zeros((h, 3), dtype=self.dtype)
        self.bs = np.zeros(3, dtype=self.dtype)

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wp", "bp", "Wr", "br", "Ws", "bs")

    def params(self):
        return {f"mlp_{n}": getattr(self, n) for n in self.PARAM_NAMES}

    def forward(self, latent):
        z1 = latent @ self.W1.astype(latent.dtype, copy=False) + self.b1.astype(latent.dtype)
        h1 = np.maximum(z1, 0)
        z2 = h1 @ self.W2.astype(latent.dtype, copy=False) + self.b2.astype(latent.dtype)
        h2 = np.maximum(z2, 0)
        dpos = h2 @ self.Wp.astype(latent.dtype, copy=False) + self.bp.astype(latent.dtype)
        drot = h2 @ self.Wr.astype(latent.dtype, copy=False) + self.br.astype(latent.dtype)
        dlogs = h2 @ self.Ws.astype(latent.dtype, copy=False) + self.bs.astype(latent.dtype)
        ctx = (latent, z1 > 0, h1, z2 > 0, h2)
        return (dpos, drot, dlogs), ctx

    def backward(self, ctx, gdpos, gdrot, gdlogs):
        latent, m1, h1, m2, h2 = ctx
        grads = {}
        grads["mlp_Wp"] = h2.T @ gdpos
        grads["mlp_bp"] = gdpos.sum(axis=0)
        grads["mlp_Wr"] = h2.T @ gdrot
        grads["mlp_br"] = gdrot.sum(axis=0)
        grads["mlp_Ws"] = h2.T @ gdlogs
        grads["mlp_bs"] = gdlogs.sum(axis=0)
        gh2 = (gdpos @ self.Wp.T.astype(gdpos.dtype, copy=False)
               + gdrot @ self.Wr.T.astype(gdpos.dtype, copy=False)
               + gdlogs @ self.Ws.T.astype(gdpos.dtype, copy=False))
        gz2 = gh2 * m2
        grads["mlp_W2"] = h1.T @ gz2
        grads["mlp_b2"] = gz2.sum(axis=0)
        gh1 = gz2 @ self.W2.T.astype(gz2.dtype, copy=False)
        gz1 = gh1 * m1
        grads["mlp_W1"] = latent.T @ gz1
        grads["mlp_b1"] = gz1.sum(axis=0)
        glatent = gz1 @ self.W1.T.astype(gz1.dtype, copy=False)
        return grads, glatent


@dataclass
class DeformationContext:
    encode_ctx: tuple
    head_ctx: tuple
    field: EncodingField
    head: DeformationHead


def apply_deformation(cloud, field, head, tau):
    """Deform the cloud to timestamp tau; opacity and SH pass through unchanged.

    Returns (deformed GaussianCloud, DeformationContext).  The rotation offset
    is added to the raw quaternion; normalization happens where the rotation
    is consumed, so a zero offset leaves the stored state bit-identical.
    """
    if not (0.0 <= tau <= 1.0):
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    latent, ectx = field.encode(cloud.positions, tau)
    (dpos, drot, dlogs), hctx = head.forward(latent)
    deformed = GaussianCloud(cloud.positions + dpos, cloud.rotations + drot,
                             cloud.log_scales + dlogs, cloud.opacities, cloud.sh,
                             cloud.sh_degree)
    return deformed, DeformationContext(ectx, hctx, field, head)


def deformation_backward(ctx, gpos_deformed, grot_deformed, glogs_deformed):
    """Gradients at the deformed tuple -> field/head grads + canonical position grad.

    The canonical position receives two contributions: the identity pass-through
    and the encoding's dependence on the query position.
    """
    head_grads, glatent = ctx.head.backward(ctx.head_ctx, gpos_deformed,
                                            grot_deformed, glogs_deformed)
    plane_grads, gpos_enc = ctx.field.encode_backward(ctx.encode_ctx, glatent)
    grads = {}
    grads.update(plane_grads)
    grads.update(head_grads)
    return grads, gpos_deformed + gpos_enc
