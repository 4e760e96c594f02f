"""Pinhole camera algebra and the pseudo-spherical depth representation.

Conventions, fixed once and used by every module:

* Camera frame is right-handed with x right, y down, z forward along the
  optical axis.
* Pixel (row i, column j) has its center at continuous image coordinates
  (u, v) = (j + 0.5, i + 0.5).
* Azimuth ``theta = atan2(x, z)`` rotates about the vertical axis;
  elevation ``phi = atan2(y, hypot(x, z))``. Both have a closed-form
  inverse (see :func:`angles_to_rays`).
* Depth is the z coordinate of a point (optical-axis depth), not the range
  along the ray. ``backproject(..., radial=True)`` switches to range
  semantics for callers that need it.
* All computation is float64; grids may be stored as float32 for I/O.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UsageError

__all__ = [
    "Intrinsics",
    "IntrinsicsResiduals",
    "AngleMap",
    "RayGrid",
    "DepthMap",
    "PointCloud",
    "RayEncoding",
    "intrinsics_from_residuals",
    "unproject_rays",
    "rays_to_angles",
    "angles_to_rays",
    "backproject",
    "project_to_angles_depth",
    "homogeneous_rays",
    "sine_encode",
    "angles_fov_check",
]

# A validity mask is a plain H x W boolean array, same shape as the grid it
# guards. Kept as an alias rather than a wrapper class: every consumer takes
# the array directly.
ValidityMask = np.ndarray


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            warnings.warn(
                f"principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} image",
                stacklevel=3,
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, k: float) -> "Intrinsics":
        """The same camera at a k-times larger grid resolution."""
        return Intrinsics(
            self.fx * k, self.fy * k, self.cx * k, self.cy * k,
            int(round(self.width * k)), int(round(self.height * k)),
        )


@dataclass(frozen=True)
class IntrinsicsResiduals:
    """Dimensionless multiplicative residuals on the half-size pinhole init."""

    dfx: float
    dfy: float
    dcx: float
    dcy: float

    def __post_init__(self):
        if not (self.dfx > 0 and self.dfy > 0):
            raise DomainError(
                f"focal residuals must be positive, got dfx={self.dfx}, dfy={self.dfy}"
            )


@dataclass(frozen=True)
class AngleMap:
    """Dense azimuth/elevation grids in radians."""

    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        phi = np.asarray(self.phi, dtype=np.float64)
        if theta.shape != phi.shape or theta.ndim != 2:
            raise UsageError(f"theta/phi must be matching 2-D grids, got {theta.shape} vs {phi.shape}")
        if not (np.isfinite(theta).all() and np.isfinite(phi).all()):
            raise DomainError("angle maps must be finite everywhere")
        if np.abs(theta).max(initial=0.0) > np.pi or np.abs(phi).max(initial=0.0) >= np.pi / 2:
            raise DomainError("angles out of range: need |theta| <= pi and |phi| < pi/2")
        object.__setattr__(self, "theta", _freeze(theta))
        object.__setattr__(self, "phi", _freeze(phi))

    @property
    def height(self) -> int:
        return self.theta.shape[0]

    @property
    def width(self) -> int:
        return self.theta.shape[1]


@dataclass(frozen=True)
class RayGrid:
    """H x W grid of unit direction vectors in the camera frame."""

    dirs: np.ndarray

    def __post_init__(self):
        dirs = np.asarray(self.dirs, dtype=np.float64)
        if dirs.ndim != 3 or dirs.shape[2] != 3:
            raise UsageError(f"dirs must be (H, W, 3), got {dirs.shape}")
        norms = np.linalg.norm(dirs, axis=2)
        if norms.size and np.abs(norms - 1.0).max() > 1e-9:
            raise DomainError("ray directions must be unit length within 1e-9")
        object.__setattr__(self, "dirs", _freeze(dirs))

    @property
    def height(self) -> int:
        return self.dirs.shape[0]

    @property
    def width(self) -> int:
        return self.dirs.shape[1]


@dataclass(frozen=True)
class DepthMap:
    """Metric z-depth grid with a validity mask.

    Values at invalid pixels carry no meaning and are stored as NaN.
    """

    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise UsageError(f"depth must be 2-D, got shape {values.shape}")
        if self.mask is None:
            mask = np.isfinite(values) & (values > 0)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise UsageError(f"mask shape {mask.shape} != depth shape {values.shape}")
        valid = values[mask]
        if valid.size and not (np.isfinite(valid).all() and (valid > 0).all()):
            raise DomainError("valid depth entries must be positive and finite")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "mask", _freeze(mask))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def log_values(self) -> np.ndarray:
        """Natural log of depth; NaN at invalid pixels."""
        out = np.full_like(self.values, np.nan)
        out[self.mask] = np.log(self.values[self.mask])
        return out


@dataclass(frozen=True)
class PointCloud:
    """Metric 3-D points, optionally tagged with their source pixel index."""

    points: np.ndarray
    pixel_index: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.size and not np.isfinite(pts).all():
            raise DomainError("point coordinates must be finite")
        object.__setattr__(self, "points", _freeze(pts))
        if self.pixel_index is not None:
            idx = np.asarray(self.pixel_index, dtype=np.int64)
            if idx.shape != (pts.shape[0],):
                raise UsageError("pixel_index must have one entry per point")
            object.__setattr__(self, "pixel_index", _freeze(idx))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RayEncoding:
    """H x W x 128 sine/cosine embedding of the homogeneous rays."""

    channels: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[2] != 128:
            raise UsageError(f"encoding must have exactly 128 channels, got shape {ch.shape}")
        if ch.size and (np.abs(ch).max() > 1.0 + 1e-12 or not np.isfinite(ch).all()):
            raise DomainError("encoding values must lie in [-1, 1]")
        object.__setattr__(self, "channels", _freeze(ch))


# ---------------------------------------------------------------------------
# operations


def intrinsics_from_residuals(res: IntrinsicsResiduals, width: int, height: int) -> Intrinsics:
    """Expand multiplicative residuals into pixel-unit intrinsics.

    fx = dfx * W/2, fy = dfy * H/2, cx = dcx * W/2, cy = dcy * H/2.
    """
    if width < 1 or height < 1:
        raise DomainError(f"image size must be >= 1, got {width}x{height}")
    return Intrinsics(
        fx=res.dfx * width / 2.0,
        fy=res.dfy * height / 2.0,
        cx=res.dcx * width / 2.0,
        cy=res.dcy * height / 2.0,
        width=width,
        height=height,
    )


def _pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    return np.meshgrid(u, v)


def _dirs_from_centers(K: Intrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    x = (u - K.cx) / K.fx
    y = (v - K.cy) / K.fy
    z = np.ones_like(x)
    d = np.stack([x, y, z], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def unproject_rays(K: Intrinsics) -> RayGrid:
    """Unit ray through each pixel center: normalize(((u-cx)/fx, (v-cy)/fy, 1))."""
    u, v = _pixel_centers(K.width, K.height)
    return RayGrid(_dirs_from_centers(K, u, v))


def rays_to_angles(rays: RayGrid) -> AngleMap:
    """Azimuth/elevation of each ray: theta = atan2(x, z), phi = atan2(y, hypot(x, z))."""
    d = rays.dirs
    norms = np.linalg.norm(d, axis=2)
    if norms.size and norms.min(initial=1.0) <= 0:
        raise DomainError("zero-norm ray")
    theta = np.arctan2(d[..., 0], d[..., 2])
    phi = np.arctan2(d[..., 1], np.hypot(d[..., 0], d[..., 2]))
    return AngleMap(theta=theta, phi=phi)


def _dirs_from_angles(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    cos_phi = np.cos(phi)
    return np.stack(
        [np.sin(theta) * cos_phi, np.sin(phi), np.cos(theta) * cos_phi], axis=-1
    )


def angles_to_rays(angles: AngleMap) -> RayGrid:
    """Exact inverse of :func:`rays_to_angles`."""
    return RayGrid(_dirs_from_angles(angles.theta, angles.phi))


def backproject(angles: AngleMap, depth: DepthMap, radial: bool = False) -> PointCloud:
    """Lift valid pixels to 3-D points.

    With z-depth semantics (default): p = (tan(theta) * z, tan(phi)/cos(theta) * z, z).
    With ``radial=True`` the depth value is treated as range along the ray.
    """
    if angles.theta.shape != depth.values.shape:
        raise UsageError(
            f"angle grid {angles.theta.shape} does not match depth grid {depth.values.shape}"
        )
    mask = depth.mask
    theta = angles.theta[mask]
    phi = angles.phi[mask]
    if theta.size and np.abs(theta).max() >= np.pi / 2 and not radial:
        raise DomainError("|theta| >= pi/2 at a valid pixel: ray behind the image plane")
    z = depth.values[mask]
    if radial:
        pts = _dirs_from_angles(theta, phi) * z[:, None]
    else:
        x = np.tan(theta) * z
        y = np.tan(phi) / np.cos(theta) * z
        pts = np.stack([x, y, z], axis=-1)
    flat = np.flatnonzero(mask.ravel())
    return PointCloud(points=pts, pixel_index=flat)


def project_to_angles_depth(points: PointCloud) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`backproject`: per-point (theta, phi, z-depth)."""
    p = points.points
    z = p[:, 2]
    if z.size and z.min(initial=1.0) <= 0:
        raise DomainError("points must have z > 0")
    theta = np.arctan2(p[:, 0], z)
    phi = np.arctan2(p[:, 1], np.hypot(p[:, 0], z))
    return theta, phi, z.copy()


def homogeneous_rays(K: Intrinsics) -> np.ndarray:
    """H x W x 2 grid of (rx, ry) = ((u-cx)/fx, (v-cy)/fy) at pixel centers."""
    u, v = _pixel_centers(K.width, K.height)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy], axis=-1)


N_FREQUENCIES = 32
FREQ_LOW = np.pi
FREQ_HIGH = 64.0 * np.pi


def sine_frequencies() -> np.ndarray:
    """The 32 log-spaced angular frequencies used by :func:`sine_encode`."""
    return np.geomspace(FREQ_LOW, FREQ_HIGH, N_FREQUENCIES)


def sine_encode(hrays: np.ndarray) -> RayEncoding:
    """Sine/cosine embedding of homogeneous rays: 64 channels per ray
    dimension (32 sine + 32 cosine), 128 channels total.

    Channel layout per dimension d in (rx, ry):
    [sin(w_0 d) .. sin(w_31 d), cos(w_0 d) .. cos(w_31 d)].
    """
    hr = np.asarray(hrays, dtype=np.float64)
    if hr.ndim != 3 or hr.shape[2] != 2:
        raise UsageError(f"homogeneous rays must be (H, W, 2), got {hr.shape}")
    if hr.size and not np.isfinite(hr).all():
        raise DomainError("homogeneous rays must be finite")
    w = sine_frequencies()
    blocks = []
    for d in range(2):
        phase = hr[..., d:d + 1] * w  # (H, W, 32)
        blocks.append(np.sin(phase))
        blocks.append(np.cos(phase))
    return RayEncoding(np.concatenate(blocks, axis=-1))


def angles_fov_check(K1: Intrinsics, K2: Intrinsics) -> float:
    """Max angular deviation (radians) between rays of two cameras that are
    the same camera expressed at different grid resolutions.

    K2 must equal K1 with fx, fy, cx, cy, width, height all multiplied by a
    common factor k. Pixel centers of K1 are compared against the aligned
    continuous positions k*(u+0.5, v+0.5) in K2's grid.
    """
    if K2.width * K1.height != K2.height * K1.width:
        raise UsageError(
            f"grids are not aligned: {K1.width}x{K1.height} vs {K2.width}x{K2.height}"
        )
    k = K2.width / K1.width
    u1, v1 = _pixel_centers(K1.width, K1.height)
    d1 = _dirs_from_centers(K1, u1, v1)
    d2 = _dirs_from_centers(K2, u1 * k, v1 * k)
    cross = np.linalg.norm(np.cross(d1, d2), axis=-1)
    dot = np.sum(d1 * d2, axis=-1)
    return float(np.arctan2(cross, dot).max())
