"""Image / depth quality metrics, the FPS harness, and report emission.

Aggregates are plain means over evaluated views.  FPS is measured on renders
only (no file I/O inside the timed region) and is excluded from reports unless
explicitly requested, so that repeated evaluations of the same checkpoint
produce byte-identical report files.
"""

import json
import logging
import time as _time

import numpy as np
from scipy.ndimage import correlate

from .exceptions import DegenerateStatisticsError, ValidationError
from .priors import minmax_normalize, pearson_corr
from .rasterizer import RenderSettings, render

log = logging.getLogger(__name__)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def psnr(a, b, mask=None, eps=None):
    """10*log10(1/MSE) for images in [0, 1]; identical inputs give +inf.

    mask: optional (H, W) with 1 = excluded pixel (tool occlusion).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    d2 = (a - b) ** 2
    if mask is not None:
        keep = np.asarray(mask) == 0
        if a.ndim == 3:
            keep = np.broadcast_to(keep[..., None], a.shape)
        if not np.any(keep):
            raise DegenerateStatisticsError("no unmasked pixels for psnr")
        mse = float(d2[keep].mean())
    else:
        mse = float(d2.mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    ax = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_map(a, b, kernel):
    """Per-pixel SSIM over the valid (fully inside) window positions."""
    r = kernel.shape[0] // 2

    def win(x):
        return correlate(x, kernel, mode="constant")[r:-r, r:-r]

    mu_a = win(a)
    mu_b = win(b)
    var_a = win(a * a) - mu_a * mu_a
    var_b = win(b * b) - mu_b * mu_b
    cov = win(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return num / den


def ssim(a, b, mask=None):
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2.

    Color images are scored per channel and averaged.  With a mask, windows
    touching any excluded pixel are dropped from the mean.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValidationError(
            f"image {a.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} ssim window")
    kernel = _gaussian_kernel()
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    maps = [_ssim_map(a[..., c], b[..., c], kernel) for c in range(a.shape[-1])]
    if mask is None:
        return float(np.mean([m.mean() for m in maps]))
    r = _SSIM_WINDOW // 2
    box = np.ones((_SSIM_WINDOW, _SSIM_WINDOW))
    hits = correlate(np.asarray(mask, dtype=float), box,
                     mode="constant", cval=1.0)[r:-r, r:-r]
    keep = hits == 0
    if not np.any(keep):
        raise DegenerateStatisticsError("mask covers every ssim window")
    return float(np.mean([m[keep].mean() for m in maps]))


def depth_tv(depth):
    """Anisotropic total variation: unnormalized sum of absolute neighbor
    differences along both axes."""
    d = np.asarray(depth, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValidationError("depth map contains non-finite values")
    return float(np.abs(np.diff(d, axis=0)).sum() + np.abs(np.diff(d, axis=1)).sum())


def delta1(depth_pred, depth_ref, valid=None, threshold=1.25):
    """Fraction of valid pixels with max(ratio, 1/ratio) < threshold after
    median-scaling the prediction onto the reference."""
    dp = np.asarray(depth_pred, dtype=float).ravel()
    dr = np.asarray(depth_ref, dtype=float).ravel()
    if dp.shape != dr.shape:
        raise ValidationError("depth shapes differ")
    if valid is not None:
        v = np.asarray(valid, dtype=bool).ravel()
        dp, dr = dp[v], dr[v]
    if dp.size == 0:
        raise DegenerateStatisticsError("no valid pixels for delta1")
    if np.any(dp <= 0) or np.any(dr <= 0):
        raise ValidationError("delta1 requires strictly positive valid depths")
    med = np.median(dp)
    if med <= 0:
        raise DegenerateStatisticsError("non-positive median depth")
    dp = dp * (np.median(dr) / med)
    ratio = np.maximum(dp / dr, dr / dp)
    return float(np.mean(ratio < threshold))


# --------------------------------------------------------------------------
# FPS harness
# --------------------------------------------------------------------------

def _fps_from(count, seconds):
    if seconds <= 0:
        raise ValidationError("timed interval must be positive")
    return count / seconds


def measure_fps(cloud, views, repeats=3, settings=None, dtype=np.float32):
    """Frames per second over `repeats` passes of all views.

    One warm-up render is excluded from the clock.  Outputs are asserted
    bit-identical between repeats; a mismatch means the renderer is not
    deterministic and is reported as an error.
    """
    if repeats <= 0:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    if not views:
        raise ValidationError("need at least one view")
    settings = settings or RenderSettings()
    render(cloud, views[0], dtype=dtype, settings=settings)   # warm-up
    reference = None
    t0 = _time.perf_counter()
    for rep in range(repeats):
        outputs = [render(cloud, v, dtype=dtype, settings=settings).color
                   for v in views]
        if reference is None:
            reference = outputs
        else:
            for got, want in zip(outputs, reference):
                if not np.array_equal(got, want):
                    raise ValidationError("render outputs differ between repeats")
    seconds = _time.perf_counter() - t0
    return _fps_from(repeats * len(views), seconds)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

REPORT_COLUMNS = ("fps", "depth_tv", "delta1", "depth_ssim", "psnr", "ssim")


def _render_for_eval(model, view, settings, dtype):
    """Render `model` (TrainState / LoadedCheckpoint / bare cloud) at a view."""
    cloud = model if not hasattr(model, "cloud") else model.cloud
    field = getattr(model, "field", None)
    head = getattr(model, "head", None)
    if field is not None and head is not None:
        from .deformation import apply_deformation
        cloud, _ = apply_deformation(cloud, field, head, view.time)
    return render(cloud, view, dtype=dtype, settings=settings)


def evaluate(model, views, settings=None, dtype=np.float32, with_fps=False,
             fps_repeats=3, depth_accum_threshold=0.1):
    """Per-view + aggregate metric report against the views' ground truth.

    FPS is wall-clock and therefore omitted unless `with_fps` is set; all other
    entries are deterministic functions of the model and data.
    """
    settings = settings or RenderSettings()
    per_view = []
    for view in views:
        if view.gt_image is None:
            raise ValidationError(f"view {view.view_id} carries no ground-truth image")
        out = _render_for_eval(model, view, settings, dtype)
        mask = view.mask
        row = {
            "view_id": view.view_id,
            "psnr": psnr(out.color, view.gt_image, mask=mask),
            "ssim": ssim(out.color, view.gt_image, mask=mask),
        }
        dn = out.depth_norm
        try:
            row["depth_tv"] = depth_tv(minmax_normalize(dn))
        except DegenerateStatisticsError:
            row["depth_tv"] = 0.0
        if view.gt_depth is not None:
            valid = (out.accum_alpha > depth_accum_threshold) & (view.gt_depth > 0)
            if mask is not None:
                valid &= mask == 0
            try:
                row["delta1"] = delta1(np.where(valid, dn, 1.0), view.gt_depth, valid)
                row["depth_pearson"] = pearson_corr(dn, view.gt_depth, valid)
                row["depth_ssim"] = ssim(minmax_normalize(dn, valid),
                                         minmax_normalize(view.gt_depth, valid),
                                         mask=mask)
            except DegenerateStatisticsError as err:
                log.warning("view %s: degenerate depth statistics (%s)", view.view_id, err)
                row["delta1"] = 0.0
                row["depth_pearson"] = 0.0
                row["depth_ssim"] = 0.0
        per_view.append(row)
    keys = sorted({k for row in per_view for k in row if k != "view_id"})
    aggregate = {}
    for k in keys:
        vals = [row[k] for row in per_view if k in row]
        aggregate[k] = float(np.mean(vals)) if vals else None
    report = {"views": per_view, "aggregate": aggregate, "lpips": None,
              "n_views": len(per_view)}
    if with_fps:
        report["aggregate"]["fps"] = measure_fps(
            model if not hasattr(model, "cloud") else model.cloud,
            views, repeats=fps_repeats, settings=settings, dtype=dtype)
    return report


def format_table(rows, title=None):
    """Plain-text comparison table; `rows` maps row label -> aggregate dict.

    Columns follow the FPS, TV, delta1, depth-SSIM, PSNR, SSIM order; missing
    entries print as a dash.
    """
    headers = {"fps": "FPS", "depth_tv": "TV", "delta1": "d1",
               "depth_ssim": "D-SSIM", "psnr": "PSNR", "ssim": "SSIM"}
    lines = []
    if title:
        lines.append(title)
    name_w = max([len(str(k)) for k in rows] + [6])
    header = "  ".join([" " * name_w] + [f"{headers[c]:>8}" for c in REPORT_COLUMNS])
    lines.append(header)
    for label, agg in rows.items():
        cells = []
        for c in REPORT_COLUMNS:
            v = agg.get(c)
            cells.append(f"{v:8.4f}" if isinstance(v, (int, float)) and np.isfinite(v)
                         else f"{'-':>8}")
        lines.append("  ".join([f"{label:<{name_w}}"] + cells))
    return "\n".join(lines)


def write_report(path, report):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
