"""Scene representation: anisotropic 3D Gaussians, cameras, spherical-harmonics color.

A scene is an explicit set of Gaussians, each carrying position, rotation
(quaternion, stored unnormalized), per-axis log-scale, an opacity logit and
spherical-harmonics color coefficients.  Covariances are built as
R * diag(scale)^2 * R^T so they stay symmetric PSD by construction.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DegenerateRotationError, NumericalDegeneracyError, ValidationError

# Real spherical harmonics constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    1.0925484305920792,
    0.31539156525252005,
    1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)

MAX_SH_DEGREE = 3


def sh_coeff_count(degree):
    """Number of basis functions for SH up to `degree` inclusive."""
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValidationError(f"sh degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def eval_sh_basis(dirs, degree):
    """Evaluate real SH basis values for unit directions.

    dirs: (..., 3) unit vectors.  Returns (..., K) with K = (degree+1)^2.
    """
    dirs = np.asarray(dirs)
    k = sh_coeff_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (k,), dtype=dirs.dtype)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (3.0 * zz - 1.0)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (5.0 * zz - 1.0)
        out[..., 12] = SH_C3[3] * z * (5.0 * zz - 3.0)
        out[..., 13] = SH_C3[4] * x * (5.0 * zz - 1.0)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh_basis_grad(dirs, degree):
    """Ambient-space gradient dY_k/d(x,y,z) of each basis value.

    dirs: (..., 3).  Returns (..., K, 3).  Callers restricted to the unit
    sphere must project with (I - v v^T) afterwards; the tangential part is
    independent of the polynomial extension used here.
    """
    dirs = np.asarray(dirs)
    k = sh_coeff_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g = np.zeros(dirs.shape[:-1] + (k, 3), dtype=dirs.dtype)
    if degree >= 1:
        g[..., 1, 1] = SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 2] = SH_C2[2] * 6.0 * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * 2.0 * x
        g[..., 8, 1] = SH_C2[4] * -2.0 * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 1] = SH_C3[2] * (5.0 * zz - 1.0)
        g[..., 11, 2] = SH_C3[2] * 10.0 * y * z
        g[..., 12, 2] = SH_C3[3] * (15.0 * zz - 3.0)
        g[..., 13, 0] = SH_C3[4] * (5.0 * zz - 1.0)
        g[..., 13, 2] = SH_C3[4] * 10.0 * x * z
        g[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        g[..., 14, 1] = SH_C3[5] * -2.0 * y * z
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * -6.0 * x * y
    return g


def eval_sh_color(coeffs, view_dir):
    """View-dependent RGB from SH coefficients: sum_k c_k Y_k(d) + 0.5, clamped >= 0.

    coeffs: (K, 3) or (N, K, 3); view_dir: (3,) or (N, 3) unit vectors.
    """
    coeffs = np.asarray(coeffs)
    view_dir = np.asarray(view_dir)
    squeeze = coeffs.ndim == 2
    if squeeze:
        coeffs = coeffs[None]
        view_dir = view_dir[None]
    k = coeffs.shape[1]
    degree = int(np.sqrt(k)) - 1
    if sh_coeff_count(degree) != k:
        raise ValidationError(f"coefficient count {k} is not a complete SH band")
    basis = eval_sh_basis(view_dir.astype(coeffs.dtype), degree)  # (N, K)
    color = np.einsum("nk,nkc->nc", basis, coeffs) + 0.5
    color = np.maximum(color, 0.0)
    return color[0] if squeeze else color


def normalize_quaternion(q):
    """q: (..., 4) -> unit quaternion.  Raises on (near-)zero norm."""
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateRotationError("quaternion norm is zero")
    return q / norm[..., None]


def quat_to_rotmat(q):
    """Unit quaternion (w, x, y, z) -> rotation matrix.  q: (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotmat_grad_wrt_quat(q):
    """dR/dq for unit quaternion q: (..., 4) -> (..., 4, 3, 3)."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    g = np.empty(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    # dR/dw
    g[..., 0, 0, 0], g[..., 0, 0, 1], g[..., 0, 0, 2] = zero, -2 * z, 2 * y
    g[..., 0, 1, 0], g[..., 0, 1, 1], g[..., 0, 1, 2] = 2 * z, zero, -2 * x
    g[..., 0, 2, 0], g[..., 0, 2, 1], g[..., 0, 2, 2] = -2 * y, 2 * x, zero
    # dR/dx
    g[..., 1, 0, 0], g[..., 1, 0, 1], g[..., 1, 0, 2] = zero, 2 * y, 2 * z
    g[..., 1, 1, 0], g[..., 1, 1, 1], g[..., 1, 1, 2] = 2 * y, -4 * x, -2 * w
    g[..., 1, 2, 0], g[..., 1, 2, 1], g[..., 1, 2, 2] = 2 * z, 2 * w, -4 * x
    # dR/dy
    g[..., 2, 0, 0], g[..., 2, 0, 1], g[..., 2, 0, 2] = -4 * y, 2 * x, 2 * w
    g[..., 2, 1, 0], g[..., 2, 1, 1], g[..., 2, 1, 2] = 2 * x, zero, 2 * z
    g[..., 2, 2, 0], g[..., 2, 2, 1], g[..., 2, 2, 2] = -2 * w, 2 * z, -4 * y
    # dR/dz
    g[..., 3, 0, 0], g[..., 3, 0, 1], g[..., 3, 0, 2] = -4 * z, -2 * w, 2 * x
    g[..., 3, 1, 0], g[..., 3, 1, 1], g[..., 3, 1, 2] = 2 * w, -4 * z, 2 * y
    g[..., 3, 2, 0], g[..., 3, 2, 1], g[..., 3, 2, 2] = 2 * x, 2 * y, zero
    return g


def build_covariance(scale, rotation):
    """World covariance R * diag(scale)^2 * R^T.

    scale: (3,) or (N, 3) linear scales (strictly positive);
    rotation: (4,) or (N, 4) quaternion, normalized here.
    """
    scale = np.asarray(scale)
    if np.any(scale <= 0):
        raise ValidationError("scales must be strictly positive")
    q = normalize_quaternion(rotation)
    R = quat_to_rotmat(q)
    s2 = scale * scale
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def regularize_covariance(cov):
    """Add the trace-scaled floor eps*I, eps = 1e-8 * tr(cov)/3, before inversion."""
    cov = np.asarray(cov)
    eps = 1e-8 * np.trace(cov, axis1=-2, axis2=-1) / 3.0
    return cov + eps[..., None, None] * np.eye(3, dtype=cov.dtype)


def gaussian_density(x, mean, cov):
    """Normalized 3D Gaussian density at x.

    x: (3,) or (M, 3); mean: (3,); cov: (3, 3).  A trace-scaled epsilon is
    added only if the covariance fails to invert cleanly.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or not np.isfinite(logdet):
        # fall back to the trace-scaled floor only when the clean matrix fails
        cov = regularize_covariance(cov)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0 or not np.isfinite(logdet):
            raise NumericalDegeneracyError("covariance is singular after regularization")
    try:
        prec = np.linalg.inv(cov)
    except np.linalg.LinAlgError as e:
        raise NumericalDegeneracyError(f"covariance inversion failed: {e}")
    d = x - mean
    maha = np.einsum("...i,ij,...j->...", d, prec, d)
    lognorm = -0.5 * (3.0 * np.log(2.0 * np.pi) + logdet)
    return np.exp(lognorm - 0.5 * maha)


@dataclass
class GaussianPrimitive:
    """One Gaussian: position, quaternion, per-axis log-scale, opacity logit, SH color."""

    position: np.ndarray      # (3,)
    rotation: np.ndarray      # (4,) quaternion (w, x, y, z), not necessarily unit
    log_scale: np.ndarray     # (3,)
    opacity: float            # logit; sigmoid gives base opacity
    sh: np.ndarray            # (K, 3)

    def covariance(self):
        return build_covariance(np.exp(np.asarray(self.log_scale, dtype=float)),
                                np.asarray(self.rotation, dtype=float))


class GaussianCloud:
    """Ordered set of Gaussians stored as arrays (positions, rotations, ...).

    Array storage keeps rendering vectorized; `primitives` materializes the
    per-Gaussian view when convenient.  Order is part of the contract: blending
    ties on depth break by index, and densification appends deterministically.
    """

    FIELDS = ("positions", "rotations", "log_scales", "opacities", "sh")

    def __init__(self, positions, rotations, log_scales, opacities, sh, sh_degree=None):
        # keep the caller's float precision (f32 training / f64 verification)
        def as_float(a):
            a = np.asarray(a)
            return a if np.issubdtype(a.dtype, np.floating) else a.astype(float)

        self.positions = np.atleast_2d(as_float(positions))
        self.rotations = np.atleast_2d(as_float(rotations))
        self.log_scales = np.atleast_2d(as_float(log_scales))
        self.opacities = np.atleast_1d(as_float(opacities))
        self.sh = as_float(sh)
        if self.sh.ndim == 2:
            self.sh = self.sh[None]
        if sh_degree is None:
            sh_degree = int(np.sqrt(self.sh.shape[1])) - 1
        self.sh_degree = sh_degree
        self.validate()

    def validate(self):
        n = len(self.positions)
        if self.positions.shape != (n, 3):
            raise ValidationError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.rotations.shape != (n, 4):
            raise ValidationError(f"rotations must be (N, 4), got {self.rotations.shape}")
        if self.log_scales.shape != (n, 3):
            raise ValidationError(f"log_scales must be (N, 3), got {self.log_scales.shape}")
        if self.opacities.shape != (n,):
            raise ValidationError(f"opacities must be (N,), got {self.opacities.shape}")
        k = sh_coeff_count(self.sh_degree)
        if self.sh.shape != (n, k, 3):
            raise ValidationError(f"sh must be (N, {k}, 3), got {self.sh.shape}")

    def __len__(self):
        return len(self.positions)

    @property
    def primitives(self):
        return [
            GaussianPrimitive(self.positions[i], self.rotations[i], self.log_scales[i],
                              float(self.opacities[i]), self.sh[i])
            for i in range(len(self))
        ]

    @classmethod
    def from_primitives(cls, prims, sh_degree=None):
        if not prims:
            k = sh_coeff_count(sh_degree if sh_degree is not None else 0)
            return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                       np.zeros((0,)), np.zeros((0, k, 3)), sh_degree)
        return cls(
            np.stack([p.position for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity for p in prims], dtype=float),
            np.stack([p.sh for p in prims]),
            sh_degree,
        )

    def copy(self):
        return GaussianCloud(self.positions.copy(), self.rotations.copy(),
                             self.log_scales.copy(), self.opacities.copy(),
                             self.sh.copy(), self.sh_degree)

    def astype(self, dtype):
        return GaussianCloud(self.positions.astype(dtype), self.rotations.astype(dtype),
                             self.log_scales.astype(dtype), self.opacities.astype(dtype),
                             self.sh.astype(dtype), self.sh_degree)

    def params(self):
        """Trainable parameter dict (shared references, not copies)."""
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacities": self.opacities,
            "sh": self.sh,
        }


@dataclass
class CameraView:
    """Pinhole camera with world-to-camera extrinsics (right-handed, +z forward).

    w2c is 4x4 row-major; intrinsics are in pixels; `time` is the normalized
    timestamp in [0, 1].  Ground-truth image/depth/mask are optional and only
    attached for dataset views.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    w2c: np.ndarray                       # (4, 4)
    time: float = 0.0
    view_id: Optional[int] = None
    gt_image: Optional[np.ndarray] = None     # (H, W, 3) in [0, 1]
    gt_depth: Optional[np.ndarray] = None     # (H, W)
    mask: Optional[np.ndarray] = None         # (H, W) {0, 1}; 1 = excluded pixel

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=float)
        if self.w2c.shape != (4, 4):
            raise ValidationError(f"w2c must be 4x4, got {self.w2c.shape}")
        R = self.w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValidationError("w2c rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValidationError("w2c rotation is left-handed")
        if not (0.0 <= self.time <= 1.0):
            raise ValidationError(f"time must lie in [0, 1], got {self.time}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if self.mask is not None:
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValidationError("mask must be binary {0, 1}")

    @property
    def rotation(self):
        return self.w2c[:3, :3]

    @property
    def translation(self):
        return self.w2c[:3, 3]

    @property
    def camera_center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self):
        """Unit view direction (+z of the camera) in world coordinates."""
        return self.rotation[2, :].copy()

    @property
    def up_axis(self):
        """Camera up in world coordinates (image rows grow downward)."""
        return -self.rotation[1, :].copy()


def look_at_w2c(camera_pos, target, up):
    """Build a 4x4 world-to-camera matrix looking from camera_pos toward target.

    Camera convention: x right, y down, z forward (right-handed).
    """
    camera_pos = np.asarray(camera_pos, dtype=float)
    target = np.asarray(target, dtype=float)
    up = np.asarray(up, dtype=float)
    fwd = target - camera_pos
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValidationError("camera position coincides with look-at target")
    fwd = fwd / n
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValidationError("up vector is parallel to the viewing direction")
    right = right / n
    down = np.cross(fwd, right)  # completes x-right, y-down, z-forward
    R = np.stack([right, down, fwd])
    t = -R @ camera_pos
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = t
    return w2c
