"""Geometric view augmentations and the inverse-warp machinery.

An augmentation rescales the source image by ``scale`` and then crops a
window, simulating a different apparent camera for the same scene. In
continuous center-based coordinates a source position ``u_s`` lands at
``u_o = u_s * scale - crop_x0`` in the output view; depth values are never
rescaled (metric depth is invariant under crop/resize of the image).

All sampling here uses an explicit ``numpy.random.Generator`` — no global
RNG state — so results are reproducible across runs and thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, UsageError
from .geometry import Intrinsics, DepthMap

__all__ = [
    "GeomAugmentation",
    "WarpField",
    "ShapeSample",
    "sample_augmentation",
    "apply_to_intrinsics",
    "apply_to_grid",
    "warp_depth",
    "compose_warp",
    "warp_sample",
    "sample_training_shape",
]


@dataclass(frozen=True)
class GeomAugmentation:
    """A sampled similarity transform: rescale, then crop.

    The crop origin (x0, y0) is expressed in post-rescale pixels and may be
    fractional or lie outside the rescaled source; out-of-source output
    pixels are marked invalid rather than padded.
    """

    scale: float
    tx: float
    ty: float
    crop_x0: float
    crop_y0: float
    out_w: int
    out_h: int

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale}")
        if self.out_w < 1 or self.out_h < 1:
            raise DomainError(f"degenerate crop: {self.out_w}x{self.out_h}")

    @classmethod
    def identity(cls, width: int, height: int) -> "GeomAugmentation":
        return cls(1.0, 0.0, 0.0, 0.0, 0.0, width, height)

    def src_from_out(self, xo: np.ndarray, yo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous source center coords for output center coords."""
        return (xo + self.crop_x0) / self.scale, (yo + self.crop_y0) / self.scale

    def out_from_src(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return xs * self.scale - self.crop_x0, ys * self.scale - self.crop_y0


@dataclass(frozen=True)
class WarpField:
    """Continuous source coordinates (center-based u, v) per target pixel."""

    src_coords: np.ndarray  # (H, W, 2), last axis = (u, v)
    valid: np.ndarray       # (H, W) bool

    def __post_init__(self):
        sc = np.asarray(self.src_coords, dtype=np.float64)
        va = np.asarray(self.valid, dtype=bool)
        if sc.ndim != 3 or sc.shape[2] != 2 or va.shape != sc.shape[:2]:
            raise UsageError(f"inconsistent warp field shapes {sc.shape} / {va.shape}")
        object.__setattr__(self, "src_coords", sc)
        object.__setattr__(self, "valid", va)


@dataclass(frozen=True)
class ShapeSample:
    width: int
    height: int


SCALE_LOG2_RANGE = (-2.0, 2.0)
TRANSLATION_RANGE = (-0.1, 0.1)


def sample_augmentation(
    rng: np.random.Generator,
    source_shape: tuple[int, int],
    target_shape: tuple[int, int],
) -> GeomAugmentation:
    """Draw scale = 2**U[-2, 2] and a relative translation in [-0.1, 0.1] of
    the source dims, then crop ``target_shape`` around the translated center
    in rescaled coordinates. Shapes are (height, width).
    """
    src_h, src_w = source_shape
    tgt_h, tgt_w = target_shape
    if min(src_h, src_w, tgt_h, tgt_w) < 1:
        raise DomainError("shapes must be positive")
    scale = float(2.0 ** rng.uniform(*SCALE_LOG2_RANGE))
    tx = float(rng.uniform(*TRANSLATION_RANGE))
    ty = float(rng.uniform(*TRANSLATION_RANGE))
    center_x = src_w * scale / 2.0 + tx * src_w
    center_y = src_h * scale / 2.0 + ty * src_h
    return GeomAugmentation(
        scale=scale,
        tx=tx,
        ty=ty,
        crop_x0=center_x - tgt_w / 2.0,
        crop_y0=center_y - tgt_h / 2.0,
        out_w=tgt_w,
        out_h=tgt_h,
    )


def apply_to_intrinsics(aug: GeomAugmentation, K: Intrinsics) -> Intrinsics:
    """The apparent camera of the augmented view: rays through warped pixels
    equal the rays through their source pixels under the original camera."""
    import warnings

    with warnings.catch_warnings():
        # Crops routinely push the principal point off-image; that is the
        # expected geometry of a shifted window, not a suspect calibration.
        warnings.simplefilter("ignore")
        return Intrinsics(
            fx=K.fx * aug.scale,
            fy=K.fy * aug.scale,
            cx=K.cx * aug.scale - aug.crop_x0,
            cy=K.cy * aug.scale - aug.crop_y0,
            width=aug.out_w,
            height=aug.out_h,
        )


def _resample(
    values: np.ndarray,
    mask: np.ndarray | None,
    sx: np.ndarray,
    sy: np.ndarray,
    method: str,
    return_weights: bool = False,
):
    """Invalid-aware resampling at source index coordinates (sx, sy).

    Bilinear sampling drops invalid/out-of-bounds neighbors and renormalizes
    the remaining weights, so no valid output ever mixes in an invalid
    sample; a position with no usable neighbor becomes invalid.
    """
    values = np.asarray(values)
    h, w = values.shape[:2]
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    if method == "nearest":
        ix = np.floor(sx + 0.5).astype(np.int64)
        iy = np.floor(sy + 0.5).astype(np.int64)
        inb = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        ixc = np.clip(ix, 0, w - 1)
        iyc = np.clip(iy, 0, h - 1)
        out_mask = inb & mask[iyc, ixc]
        out = np.where(_bcast(out_mask, values), values[iyc, ixc], np.nan)
        if return_weights:
            raise UsageError("weights are only defined for bilinear sampling")
        return out, out_mask
    if method != "bilinear":
        raise UsageError(f"unknown filter {method!r}")

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    acc = None
    wsum = np.zeros(sx.shape, dtype=np.float64)
    corner_w = []
    corner_idx = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xic = np.clip(xi, 0, w - 1)
            yic = np.clip(yi, 0, h - 1)
            usable = inb & mask[yic, xic]
            wgt = np.where(usable, wgt, 0.0)
            contrib = wgt[..., None] * values[yic, xic] if values.ndim == 3 else wgt * values[yic, xic]
            contrib = np.where(_bcast(usable, values), contrib, 0.0)
            acc = contrib if acc is None else acc + contrib
            wsum += wgt
            if return_weights:
                corner_w.append(wgt)
                corner_idx.append(yic * w + xic)
    out_mask = wsum > 0
    denom = np.where(out_mask, wsum, 1.0)
    out = acc / (denom[..., None] if values.ndim == 3 else denom)
    out = np.where(_bcast(out_mask, values), out, np.nan)
    if return_weights:
        norm_w = [np.where(out_mask, wgt / denom, 0.0) for wgt in corner_w]
        return out, out_mask, np.stack(norm_w), np.stack(corner_idx)
    return out, out_mask


def _bcast(mask: np.ndarray, values: np.ndarray) -> np.ndarray:
    return mask[..., None] if values.ndim == 3 else mask


def apply_to_grid(
    aug: GeomAugmentation,
    values: np.ndarray,
    mask: np.ndarray | None = None,
    method: str = "bilinear",
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp a grid into the augmented view.

    Values are resampled, never rescaled. Returns (warped values, validity).
    """
    xo, yo = np.meshgrid(
        np.arange(aug.out_w, dtype=np.float64) + 0.5,
        np.arange(aug.out_h, dtype=np.float64) + 0.5,
    )
    us, vs = aug.src_from_out(xo, yo)
    return _resample(values, mask, us - 0.5, vs - 0.5, method)


def warp_depth(aug: GeomAugmentation, depth: DepthMap, method: str = "bilinear") -> DepthMap:
    values, mask = apply_to_grid(aug, depth.values, depth.mask, method)
    return DepthMap(values=values, mask=mask)


def compose_warp(a1: GeomAugmentation, a2: GeomAugmentation) -> WarpField:
    """Warp from view 2 into view 1: for each pixel of view 2, the continuous
    center coordinates of the same scene point in view 1.

    Both augmentations must act on the same source image. Positions falling
    outside view 1's image rectangle are marked invalid.
    """
    xo, yo = np.meshgrid(
        np.arange(a2.out_w, dtype=np.float64) + 0.5,
        np.arange(a2.out_h, dtype=np.float64) + 0.5,
    )
    us, vs = a2.src_from_out(xo, yo)
    u1, v1 = a1.out_from_src(us, vs)
    valid = (u1 >= 0) & (u1 <= a1.out_w) & (v1 >= 0) & (v1 <= a1.out_h)
    return WarpField(src_coords=np.stack([u1, v1], axis=-1), valid=valid)


def warp_sample(
    warp: WarpField,
    values: np.ndarray,
    mask: np.ndarray | None = None,
    method: str = "bilinear",
    return_weights: bool = False,
):
    """Sample a view-1 grid at the warp's coordinates (invalid-aware)."""
    sx = warp.src_coords[..., 0] - 0.5
    sy = warp.src_coords[..., 1] - 0.5
    res = _resample(values, mask, sx, sy, method, return_weights=return_weights)
    if return_weights:
        out, out_mask, wts, idx = res
        return out, out_mask & warp.valid, wts, idx
    out, out_mask = res
    return out, out_mask & warp.valid


AREA_RANGE_PX = (0.2e6, 0.6e6)
RATIO_LOG2_RANGE = (-1.0, 1.0)
DIM_MULTIPLE = 14


def sample_training_shape(rng: np.random.Generator) -> ShapeSample:
    """Pixel count uniform in [0.2, 0.6] MP, aspect ratio log-uniform in
    [1/2, 2], dims rounded to multiples of 14."""
    area = rng.uniform(*AREA_RANGE_PX)
    ratio = 2.0 ** rng.uniform(*RATIO_LOG2_RANGE)
    width = np.sqrt(area * ratio)
    height = np.sqrt(area / ratio)

    def snap(x: float) -> int:
        return max(DIM_MULTIPLE, int(round(x / DIM_MULTIPLE)) * DIM_MULTIPLE)

    return ShapeSample(width=snap(width), height=snap(height))
