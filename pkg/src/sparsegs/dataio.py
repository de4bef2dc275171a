"""On-disk formats and the synthetic dataset generator.

Dataset layout:

    <root>/manifest.json
    <root>/images/view_NNNN.pfm   float32 RGB, authoritative for training
    <root>/images/view_NNNN.png   8-bit preview of the same image
    <root>/depths/view_NNNN.pfm   float32 alpha-normalized depth
    <root>/masks/view_NNNN.png    binary exclusion mask (255 = excluded pixel)
    <root>/scene_gt.esck          ground-truth Gaussians + planted deformation

PFM files follow the standard convention (rows stored bottom-to-top) with a
negative scale, i.e. little-endian.  Checkpoints are a flat container of
named float32 tensors behind the magic "ESCK1".
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .exceptions import (
    ManifestError,
    MissingFileError,
    ResolutionMismatchError,
    ValidationError,
    VersionMismatchError,
)
from .scene import CameraView, GaussianCloud, look_at_w2c
from .rasterizer import render

MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"ESCK1"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# image formats
# --------------------------------------------------------------------------

def write_pfm(path, arr):
    """Write float32 PFM ('PF' color / 'Pf' gray), little-endian, scale -1.0."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
        h, w = arr.shape[:2]
    elif arr.ndim == 2:
        header = b"Pf\n"
        h, w = arr.shape
    else:
        raise ValidationError(f"PFM payload must be (H, W) or (H, W, 3), got {arr.shape}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).tobytes(order="C"))


def read_pfm(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}", path=str(path))
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValidationError(f"not a PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise ValidationError(f"truncated PFM payload in {path}")
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, arr):
    """Store [0,1] float image (or binary mask scaled by 255) as 8-bit PNG."""
    arr = np.asarray(arr)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def read_png(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}", path=str(path))
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def read_mask_png(path):
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 0.5).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def save_checkpoint(path, tensors):
    """Write named float32 tensors: magic, version, count, then per-tensor
    (u16 name length, name, u8 ndim, u32 dims..., f32 LE data)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such checkpoint: {path}", path=str(path))
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != CHECKPOINT_MAGIC:
            raise VersionMismatchError(
                f"bad checkpoint magic {magic!r} in {path}", path=str(path))
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"unsupported checkpoint version {version}", path=str(path))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack("<" + "I" * ndim, f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(n * 4), dtype="<f4")
            if data.size != n:
                raise ValidationError(f"truncated tensor {name!r} in {path}")
            tensors[name] = data.reshape(shape).astype(np.float32)
    return tensors


# --------------------------------------------------------------------------
# synthetic ground-truth scene
# --------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    """Ground-truth cloud plus a rigid sinusoidal deformation of its positions."""

    cloud: GaussianCloud
    deform_amp: np.ndarray          # (3,) world-space amplitude (zeros = static)
    deform_freq: float = 1.0
    bounds_lo: np.ndarray = None
    bounds_hi: np.ndarray = None

    def deformed_at(self, tau):
        offset = self.deform_amp * np.sin(2.0 * np.pi * self.deform_freq * tau)
        c = self.cloud
        return GaussianCloud(c.positions + offset, c.rotations, c.log_scales,
                             c.opacities, c.sh, c.sh_degree)

    def render_view(self, view):
        out = render(self.deformed_at(view.time), view, dtype=np.float64)
        return out

    def render_depth(self, view):
        return self.render_view(view).depth_norm.astype(np.float32)

    def render_image(self, view):
        return self.render_view(view).color.astype(np.float32)

    def to_tensors(self):
        c = self.cloud
        return {
            "scene/positions": c.positions, "scene/rotations": c.rotations,
            "scene/log_scales": c.log_scales, "scene/opacities": c.opacities,
            "scene/sh": c.sh, "scene/deform_amp": self.deform_amp,
            "scene/deform_freq": np.array([self.deform_freq]),
            "scene/bounds_lo": self.bounds_lo, "scene/bounds_hi": self.bounds_hi,
        }

    @classmethod
    def from_tensors(cls, t):
        cloud = GaussianCloud(t["scene/positions"], t["scene/rotations"],
                              t["scene/log_scales"], t["scene/opacities"], t["scene/sh"])
        return cls(cloud, np.asarray(t["scene/deform_amp"], dtype=float),
                   float(t["scene/deform_freq"][0]),
                   np.asarray(t["scene/bounds_lo"], dtype=float),
                   np.asarray(t["scene/bounds_hi"], dtype=float))


def _ring_cameras(n_views, width, height, radius=3.0, cam_height=0.9, focal_factor=1.25):
    views = []
    f = focal_factor * width
    for k in range(n_views):
        phi = 2.0 * np.pi * k / n_views + 0.25
        pos = np.array([radius * np.cos(phi), radius * np.sin(phi), cam_height])
        w2c = look_at_w2c(pos, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        tau = k / (n_views - 1) if n_views > 1 else 0.0
        views.append(CameraView(width=width, height=height, fx=f, fy=f,
                                cx=width / 2.0, cy=height / 2.0, w2c=w2c,
                                time=tau, view_id=k))
    return views


def _occluder_rect(view_index, n_views, width, height):
    """Moving rectangle: sweeps left to right over the view sequence."""
    rw = max(4, width // 5)
    rh = max(4, height // 4)
    frac = view_index / (n_views - 1) if n_views > 1 else 0.0
    x0 = int(round((width - rw) * frac))
    y0 = int(round(height * 0.3 + 0.12 * height * np.sin(2 * np.pi * frac)))
    y0 = min(max(y0, 0), height - rh)
    return x0, y0, rw, rh


def synth_generate(out_dir, seed=0, n_gaussians=120, n_views=12, width=64, height=64,
                   deform=False, sh_degree=2):
    """Create a deterministic synthetic dataset: a box of random Gaussian blobs,
    ring cameras, 64-bit ground-truth renders, moving-occluder masks."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    n = n_gaussians
    positions = rng.uniform(-0.8, 0.8, (n, 3))
    rotations = rng.normal(0.0, 1.0, (n, 4))
    log_scales = rng.uniform(np.log(0.07), np.log(0.16), (n, 3))
    opacities = rng.uniform(0.5, 2.5, n)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.uniform(-1.2, 1.2, (n, 3))
    if k > 1:
        sh[:, 1:, :] = 0.12 * rng.normal(0.0, 1.0, (n, k - 1, 3))
    cloud = GaussianCloud(positions, rotations, log_scales, opacities, sh, sh_degree)

    amp = np.array([0.05, -0.03, 0.07]) if deform else np.zeros(3)
    lo = positions.min(axis=0) - 0.3
    hi = positions.max(axis=0) + 0.3
    if deform:
        lo -= np.abs(amp)
        hi += np.abs(amp)
    scene = SyntheticScene(cloud, amp, 1.0, lo, hi)
    save_checkpoint(out / "scene_gt.esck", scene.to_tensors())

    views = _ring_cameras(n_views, width, height)
    entries = []
    for v in views:
        img = scene.render_image(v)
        depth = scene.render_depth(v)
        x0, y0, rw, rh = _occluder_rect(v.view_id, n_views, width, height)
        mask = np.zeros((height, width), dtype=np.uint8)
        mask[y0:y0 + rh, x0:x0 + rw] = 1
        img = img.copy()
        img[mask == 1] = 0.35            # painted occluder; excluded by the mask

        stem = f"view_{v.view_id:04d}"
        write_pfm(out / "images" / f"{stem}.pfm", img)
        write_png(out / "images" / f"{stem}.png", img)
        write_pfm(out / "depths" / f"{stem}.pfm", depth)
        write_png(out / "masks" / f"{stem}.png", mask.astype(np.float64))
        entries.append({
            "id": v.view_id,
            "image": f"images/{stem}.pfm",
            "image_png": f"images/{stem}.png",
            "depth": f"depths/{stem}.pfm",
            "mask": f"masks/{stem}.png",
            "time": v.time,
            "intrinsics": {"fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy},
            "w2c": v.w2c.tolist(),
        })

    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "resolution": [width, height],
        "near": 0.01,
        "sh_degree": sh_degree,
        "scene_bounds": {"lo": lo.tolist(), "hi": hi.tolist()},
        "scene_gt": "scene_gt.esck",
        "deform": {"amp": amp.tolist(), "freq": 1.0},
        "views": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return out


# --------------------------------------------------------------------------
# dataset loading + validation
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    manifest: dict
    views: list                       # CameraView with gt_image/gt_depth/mask attached
    scene: Optional[SyntheticScene]
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    @property
    def resolution(self):
        return tuple(self.manifest["resolution"])


def load_dataset(root):
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"no manifest at {mpath}", path=str(mpath))
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}", path=str(mpath))
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise VersionMismatchError(
            f"manifest format_version {manifest.get('format_version')} "
            f"!= {MANIFEST_VERSION}", path=str(mpath))
    width, height = manifest["resolution"]

    views = []
    for entry in manifest["views"]:
        vid = entry["id"]

        def _resolve(key, required=True):
            rel = entry.get(key)
            if rel is None:
                if required:
                    raise ManifestError(f"view {vid} is missing '{key}'", view=vid)
                return None
            p = root / rel
            if not p.exists():
                raise MissingFileError(f"view {vid}: referenced file missing: {p}",
                                       view=vid, path=str(p))
            return p

        img = read_pfm(_resolve("image"))
        if img.shape[:2] != (height, width):
            raise ResolutionMismatchError(
                f"view {vid}: image is {img.shape[1]}x{img.shape[0]}, "
                f"manifest declares {width}x{height}", view=vid)
        depth = None
        dp = _resolve("depth", required=False)
        if dp is not None:
            depth = read_pfm(dp)
            if depth.shape != (height, width):
                raise ResolutionMismatchError(
                    f"view {vid}: depth is {depth.shape[1]}x{depth.shape[0]}, "
                    f"manifest declares {width}x{height}", view=vid)
        mask = None
        mp = _resolve("mask", required=False)
        if mp is not None:
            mask = read_mask_png(mp)
            if mask.shape != (height, width):
                raise ResolutionMismatchError(
                    f"view {vid}: mask resolution mismatch", view=vid)
        intr = entry["intrinsics"]
        views.append(CameraView(
            width=width, height=height, fx=intr["fx"], fy=intr["fy"],
            cx=intr["cx"], cy=intr["cy"], w2c=np.asarray(entry["w2c"], dtype=float),
            time=entry["time"], view_id=vid, gt_image=img, gt_depth=depth, mask=mask))

    scene = None
    if manifest.get("scene_gt"):
        spath = root / manifest["scene_gt"]
        if spath.exists():
            scene = SyntheticScene.from_tensors(load_checkpoint(spath))
    bounds = manifest.get("scene_bounds")
    if bounds:
        lo = np.asarray(bounds["lo"], dtype=float)
        hi = np.asarray(bounds["hi"], dtype=float)
    else:
        lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    return Dataset(root=root, manifest=manifest, views=views, scene=scene,
                   bounds_lo=lo, bounds_hi=hi)
