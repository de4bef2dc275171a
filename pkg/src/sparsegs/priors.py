"""Vision-prior plumbing: diffusion noising + score-distillation residual,
Pearson-correlation depth consistency, and the provider abstraction that
connects either to oracles (for synthetic scenes), fixed files, or an
external process speaking a small binary frame protocol.

Denoiser providers implement predict_noise(noised, t, conditioning=None,
draw=None): `conditioning` is an opaque payload forwarded as-is (external
providers receive it as an auxiliary frame), and `draw` is the recorded
noising event, which only the oracle consults.  The denoiser is never
differentiated through: the distillation gradient is the noise residual
scaled by sqrt(alpha_bar_t) * w(t), propagated through the noising step only.
"""

import logging
import shlex
import struct
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import (
    DegenerateStatisticsError,
    MalformedFrameError,
    MissingPriorFileError,
    ProviderError,
    ProviderTimeoutError,
    ValidationError,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# diffusion schedule + forward noising
# --------------------------------------------------------------------------

class DiffusionSchedule:
    """Linear-beta DDPM schedule; alpha_bar(t) = prod_{s<=t} (1 - beta_s), t in [1, T]."""

    def __init__(self, n_steps=1000, beta_start=1e-4, beta_end=0.02):
        if n_steps < 1:
            raise ValidationError("schedule needs at least one step")
        if not (0 < beta_start <= beta_end < 1):
            raise ValidationError("betas must satisfy 0 < start <= end < 1")
        self.n_steps = n_steps
        self.betas = np.linspace(beta_start, beta_end, n_steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def alpha_bar_at(self, t):
        if not (1 <= t <= self.n_steps):
            raise ValidationError(f"timestep must lie in [1, {self.n_steps}], got {t}")
        return float(self.alpha_bar[t - 1])


@dataclass
class NoiseDraw:
    """One recorded noising event: timestep + the exact noise map used."""

    t: int
    eps: np.ndarray
    stream: Optional[str] = None


def draw_noise(rng, shape, schedule):
    t = int(rng.integers(1, schedule.n_steps + 1))
    eps = rng.standard_normal(shape)
    return NoiseDraw(t=t, eps=eps)


def add_noise(image, eps, alpha_bar):
    """sqrt(ab) * image + sqrt(1 - ab) * eps.  Exact at ab = 1 and ab = 0."""
    if not (0.0 <= alpha_bar <= 1.0):
        raise ValidationError(f"alpha_bar must lie in [0, 1], got {alpha_bar}")
    image = np.asarray(image)
    eps = np.asarray(eps)
    if eps.shape != image.shape:
        raise ValidationError(
            f"noise shape {eps.shape} does not match image shape {image.shape}")
    if alpha_bar == 1.0:
        return image.copy()
    if alpha_bar == 0.0:
        return eps.astype(image.dtype, copy=True)
    dt = image.dtype.type
    return dt(np.sqrt(alpha_bar)) * image + dt(np.sqrt(1.0 - alpha_bar)) * eps.astype(
        image.dtype, copy=False)


def add_noise_at(image, draw, schedule):
    return add_noise(image, draw.eps, schedule.alpha_bar_at(draw.t))


# --------------------------------------------------------------------------
# score distillation
# --------------------------------------------------------------------------

@dataclass
class SDSResult:
    loss: float                 # mean squared residual over unmasked pixels
    grad_image: np.ndarray      # (H, W, 3) gradient w.r.t. the rendered image
    residual: np.ndarray        # (H, W, 3) predicted minus injected noise
    t: int
    alpha_bar: float
    degenerate: bool = False


def sds_residual(image, provider, schedule, draw, mask=None, weight=1.0):
    """Distillation residual for one rendered image.

    The provider predicts the injected noise from the noised image; the
    returned gradient is sqrt(alpha_bar_t) * w(t) * (eps_hat - eps) restricted
    to unmasked pixels and scaled by the mean reduction, i.e. the denoiser is
    treated as frozen and only the noising step is differentiated.
    mask: optional (H, W) with 1 = excluded pixel.
    """
    image = np.asarray(image)
    ab = schedule.alpha_bar_at(draw.t)
    noised = add_noise(image, draw.eps, ab)
    eps_hat = provider.predict_noise(noised, draw.t, conditioning=image, draw=draw)
    eps_hat = np.asarray(eps_hat, dtype=image.dtype)
    if eps_hat.shape != image.shape:
        raise ProviderError(
            f"denoiser returned shape {eps_hat.shape}, expected {image.shape}")
    residual = eps_hat - np.asarray(draw.eps, dtype=image.dtype)
    if mask is not None:
        keep = (np.asarray(mask) == 0).astype(image.dtype)[..., None]
    else:
        keep = np.ones(image.shape[:2], dtype=image.dtype)[..., None]
    n_valid = float(keep.sum() * image.shape[-1])
    if n_valid == 0:
        log.warning("sds_residual: no unmasked pixels; contribution treated as 0")
        return SDSResult(0.0, np.zeros_like(image), residual, draw.t, ab, True)
    loss = float(np.sum(keep * residual * residual) / n_valid)
    grad = (np.sqrt(ab) * weight / n_valid) * residual * keep
    return SDSResult(loss, grad.astype(image.dtype), residual, draw.t, ab)


# --------------------------------------------------------------------------
# Pearson depth consistency
# --------------------------------------------------------------------------

def minmax_normalize(depth, valid=None):
    """Per-map min-max normalization over valid pixels; raises if flat."""
    depth = np.asarray(depth)
    vals = depth[valid] if valid is not None else depth
    if vals.size == 0:
        raise DegenerateStatisticsError("no valid pixels to normalize")
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        raise DegenerateStatisticsError("depth map is constant over valid pixels")
    return (depth - lo) / (hi - lo)


def pearson_corr(a, b, valid=None, eps=1e-8):
    """Pearson correlation over valid entries.

    Raises DegenerateStatisticsError for fewer than two valid pixels or
    (near-)zero variance on either side.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if valid is not None:
        a = a[np.asarray(valid, dtype=bool)]
        b = b[np.asarray(valid, dtype=bool)]
    else:
        a = a.ravel()
        b = b.ravel()
    if a.size < 2:
        raise DegenerateStatisticsError(f"need >= 2 valid pixels, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom < eps:
        raise DegenerateStatisticsError("zero variance in depth statistics")
    return float(np.sum(da * db) / denom)


@dataclass
class GeoResult:
    loss: float
    grad: np.ndarray            # (H, W) w.r.t. the rendered depth map
    corr: float
    degenerate: bool = False


def geo_loss(depth_rendered, depth_prior, valid=None):
    """1 - PearsonCorr between rendered and prior depth over valid pixels.

    Both maps are min-max normalized first; since the correlation is invariant
    under positive affine maps this does not change the value or the gradient,
    so the analytic gradient is evaluated directly on the raw rendered depth.
    Degenerate statistics yield a zero loss with zero gradient (logged).
    """
    depth_rendered = np.asarray(depth_rendered, dtype=float)
    depth_prior = np.asarray(depth_prior, dtype=float)
    grad = np.zeros_like(depth_rendered)
    try:
        dn = minmax_normalize(depth_rendered, valid)
        pn = minmax_normalize(depth_prior, valid)
        r = pearson_corr(dn, pn, valid)
    except DegenerateStatisticsError as e:
        log.warning("geo_loss degenerate (%s); contribution treated as 0", e)
        return GeoResult(0.0, grad, 0.0, True)

    if valid is None:
        vmask = np.ones(depth_rendered.shape, dtype=bool)
    else:
        vmask = np.asarray(valid, dtype=bool)
    x = depth_rendered[vmask]
    y = depth_prior[vmask]
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.sum(dx * dx)
    sxy = np.sum(dx * dy)
    syy = np.sum(dy * dy)
    denom = np.sqrt(sxx * syy)
    # d r / d x_i = [ (y_i - ybar) - r * sqrt(syy/sxx) * (x_i - xbar) ] / denom
    gr = (dy - (sxy / sxx) * dx) / denom
    grad[vmask] = -gr            # loss = 1 - r
    return GeoResult(float(1.0 - r), grad, float(r))


# --------------------------------------------------------------------------
# binary frame protocol ("ESPR1") + provider implementations
# --------------------------------------------------------------------------

FRAME_MAGIC = b"ESPR1"


def encode_frame(arr):
    """Serialize a 2D/3D float map into one length-prefixed frame."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        h, w = arr.shape
        c = 1
    elif arr.ndim == 3:
        h, w, c = arr.shape
    else:
        raise ValidationError(f"frame payload must be 2D or 3D, got shape {arr.shape}")
    body = FRAME_MAGIC + struct.pack("<III", w, h, c) + arr.tobytes(order="C")
    return struct.pack("<I", len(body)) + body


def decode_frame(buf, offset=0):
    """Parse one frame from bytes; returns (array, next_offset)."""
    if len(buf) - offset < 4:
        raise MalformedFrameError("truncated frame: missing length prefix")
    (blen,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) - offset < blen:
        raise MalformedFrameError(
            f"truncated frame: declared {blen} bytes, got {len(buf) - offset}")
    body = buf[offset:offset + blen]
    offset += blen
    if body[:5] != FRAME_MAGIC:
        raise MalformedFrameError(f"bad frame magic {body[:5]!r}")
    w, h, c = struct.unpack_from("<III", body, 5)
    expected = w * h * c * 4
    data = body[17:]
    if len(data) != expected:
        raise MalformedFrameError(
            f"frame payload is {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f4").reshape(h, w, c)
    if c == 1:
        arr = arr[:, :, 0]
    return arr.copy(), offset


def _run_subprocess(cmd, request, timeout):
    try:
        proc = subprocess.run(shlex.split(cmd), input=request,
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                              timeout=timeout)
    except subprocess.TimeoutExpired:
        raise ProviderTimeoutError(f"provider command timed out after {timeout}s",
                                   command=cmd)
    except OSError as e:
        raise ProviderError(f"failed to launch provider command: {e}", command=cmd)
    if proc.returncode != 0:
        raise ProviderError(
            f"provider exited with status {proc.returncode}: "
            f"{proc.stderr.decode(errors='replace')[:200]}", command=cmd)
    arr, _ = decode_frame(proc.stdout)
    return arr


def _encode_request(image, t=0, aux=()):
    """Request layout: frame(image) + u32 t + u32 n_aux + aux frames."""
    parts = [encode_frame(image), struct.pack("<II", t, len(aux))]
    parts.extend(encode_frame(a) for a in aux)
    return b"".join(parts)


class OracleDenoiser:
    """Perfect denoiser: reports the injected noise itself.

    When the distillation step hands over the noise draw the prediction is the
    recorded noise verbatim, which makes the residual (and hence the gradient)
    exactly zero.  Called standalone without the draw it falls back to
    algebraically inverting the noising step from the clean image, which is
    correct only up to floating-point roundoff.
    """

    def __init__(self, schedule):
        self.schedule = schedule

    def predict_noise(self, noised, t, conditioning=None, draw=None):
        if draw is not None:
            return np.asarray(draw.eps, dtype=np.asarray(noised).dtype)
        if conditioning is None:
            raise ProviderError("oracle denoiser requires the clean image as conditioning")
        ab = self.schedule.alpha_bar_at(t)
        clean = np.asarray(conditioning, dtype=np.asarray(noised).dtype)
        return (np.asarray(noised) - np.sqrt(ab) * clean) / np.sqrt(1.0 - ab)


class ZeroDenoiser:
    def predict_noise(self, noised, t, conditioning=None, draw=None):
        return np.zeros_like(np.asarray(noised))


class FileDenoiser:
    """Reads a fixed prediction map per timestep: <dir>/noise_t{t:04d}.pfm."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def predict_noise(self, noised, t, conditioning=None, draw=None):
        path = self.directory / f"noise_t{t:04d}.pfm"
        if not path.exists():
            raise MissingPriorFileError(f"denoiser map not found: {path}", path=str(path))
        from .dataio import read_pfm
        return read_pfm(path)


class SubprocessDenoiser:
    def __init__(self, command, timeout=30.0):
        self.command = command
        self.timeout = timeout

    def predict_noise(self, noised, t, conditioning=None, draw=None):
        aux = () if conditioning is None else (conditioning,)
        return _run_subprocess(self.command, _encode_request(noised, t, aux), self.timeout)


class OracleDepthProvider:
    """Ground-truth depth of the synthetic scene, optionally affine-warped.

    The warp (scale, shift) exercises the scale invariance of the depth loss;
    downstream consumers must not depend on the absolute range.
    """

    def __init__(self, scene, warp=(1.0, 0.0)):
        self.scene = scene
        self.warp = warp

    def predict_depth(self, image, view):
        depth = self.scene.render_depth(view)
        a, b = self.warp
        if (a, b) != (1.0, 0.0):
            depth = a * depth + b
        return depth


class FileDepthProvider:
    """Reads a precomputed per-view map: <dir>/depth_{view_id:04d}.pfm."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def predict_depth(self, image, view):
        if view.view_id is None:
            raise ProviderError("file depth provider needs a view id")
        path = self.directory / f"depth_{view.view_id:04d}.pfm"
        if not path.exists():
            raise MissingPriorFileError(f"depth map not found: {path}", path=str(path))
        from .dataio import read_pfm
        return read_pfm(path)


class SubprocessDepthProvider:
    def __init__(self, command, timeout=30.0):
        self.command = command
        self.timeout = timeout

    def predict_depth(self, image, view):
        return _run_subprocess(self.command, _encode_request(image), self.timeout)


def make_denoiser(spec, schedule, timeout=30.0):
    """Build a denoiser from a config value: oracle | zero | file:<dir> | subprocess:<cmd>."""
    if spec == "oracle":
        return OracleDenoiser(schedule)
    if spec == "zero":
        return ZeroDenoiser()
    if spec.startswith("file:"):
        return FileDenoiser(spec[5:])
    if spec.startswith("subprocess:"):
        return SubprocessDenoiser(spec[11:], timeout=timeout)
    raise ValidationError(f"unknown denoiser provider spec: {spec!r}")


def make_depth_provider(spec, scene=None, timeout=30.0):
    """Build a depth provider from a config value (see make_denoiser)."""
    if spec == "oracle":
        if scene is None:
            raise ValidationError("oracle depth provider needs the synthetic scene")
        return OracleDepthProvider(scene)
    if spec.startswith("file:"):
        return FileDepthProvider(spec[5:])
    if spec.startswith("subprocess:"):
        return SubprocessDepthProvider(spec[11:], timeout=timeout)
    raise ValidationError(f"unknown depth provider spec: {spec!r}")
