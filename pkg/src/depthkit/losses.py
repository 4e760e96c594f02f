"""Training losses and their analytic gradients.

Four losses are implemented:

* ``lambda_mse``   — per-dimension variance plus weighted squared-mean of the
  error vector; restricted to log-depth with weight 0.15 it reduces to the
  classic scale-invariant log loss.
* ``consistency_loss`` — L1 between one view's depth warped into another view
  and that view's depth, the second view acting as detached pseudo ground
  truth (its gradient is identically zero).
* ``eg_ssi_loss``  — per-patch L1 between median/MAD-standardized inverse
  depths on high-RGB-gradient patches.
* ``uncertainty_l1`` — L1 between predicted uncertainty and the detached
  absolute log-depth error.

Every gradient is zero at masked pixels, and every loss is a pure function of
its inputs. Gradients are returned as plain arrays under documented keys so
callers can wire them into whatever training loop they run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, UsageError
from .augment import WarpField, warp_sample
from .geometry import DepthMap
from .patchkernel import (
    MAD_FLOOR,
    MIN_VALID_PER_PATCH,
    PatchSet,
    make_work_plan,
    run_patch_loss,
)

__all__ = [
    "ErrorStats",
    "LossValue",
    "LossWeights",
    "error_stats",
    "lambda_mse",
    "consistency_loss",
    "bidirectional_consistency",
    "select_patches",
    "eg_ssi_loss",
    "uncertainty_l1",
    "total_loss",
]

DEFAULT_LAMBDA = (1.0, 1.0, 0.15)
DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 1.0
DEFAULT_GAMMA = 0.1


@dataclass(frozen=True)
class ErrorStats:
    """Per-dimension empirical mean and population variance of the error."""

    mean: np.ndarray
    var: np.ndarray
    count: int


@dataclass(frozen=True)
class LossValue:
    """A loss value and, when requested, gradients keyed by input name."""

    value: float
    grads: dict[str, np.ndarray] | None = field(default=None)


@dataclass(frozen=True)
class LossWeights:
    """Per-dimension lambda plus the combination weights (alpha, beta, gamma)."""

    lam: tuple[float, float, float] = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA


def _flatten_valid(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim < 2:
        raise UsageError("expected at least a 2-D grid")
    if mask is None:
        mask = np.ones(pred.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise UsageError("mask shape mismatch")
    return pred, gt, mask


def error_stats(pred, gt, mask=None) -> ErrorStats:
    pred, gt, mask = _flatten_valid(pred, gt, mask)
    eps = (pred - gt)[mask]
    if eps.ndim == 1:
        eps = eps[:, None]
    n = eps.shape[0]
    if n < 1:
        raise DegenerateInputError("no valid pixels")
    mean = eps.mean(axis=0)
    var = ((eps - mean) ** 2).mean(axis=0)
    return ErrorStats(mean=mean, var=var, count=n)


def lambda_mse(pred, gt, mask=None, lam=DEFAULT_LAMBDA, want_grad: bool = False) -> LossValue:
    """Sum over dimensions of V[eps] + lam_d * E[eps]^2.

    ``pred`` and ``gt`` are (H, W, D) grids (D matches ``lam``); the mask is
    shared across dimensions. Variance is the population variance. The
    analytic gradient wrt ``pred`` is (2/N) * (eps - (1 - lam_d) * E[eps]),
    returned under key ``"output"``.
    """
    pred, gt, mask = _flatten_valid(pred, gt, mask)
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    if lam.shape[0] != pred.shape[2]:
        raise UsageError(f"lambda has {lam.shape[0]} entries for {pred.shape[2]} dimensions")
    n = int(mask.sum())
    if n < 2:
        raise DegenerateInputError(f"need >= 2 valid pixels, got {n}")
    eps = (pred - gt)[mask]  # (N, D)
    mean = eps.mean(axis=0)
    var = ((eps - mean) ** 2).mean(axis=0)
    value = float(np.sum(var + lam * mean**2))
    grads = None
    if want_grad:
        g = np.zeros_like(pred)
        g[mask] = (2.0 / n) * (eps - (1.0 - lam) * mean)
        grads = {"output": g}
    return LossValue(value=value, grads=grads)


def consistency_loss(
    z1: DepthMap, z2: DepthMap, warp: WarpField, want_grad: bool = False
) -> LossValue:
    """Mean L1 between view-1 depth warped into view 2 and view-2 depth.

    View 2 is detached pseudo ground truth: the gradient flows only into
    ``z1`` (key ``"z1"``); the ``"z2"`` gradient is identically zero.
    """
    if warp.src_coords.shape[:2] != z2.values.shape:
        raise UsageError("warp field does not match the view-2 grid")
    warped, wmask, weights, idx = warp_sample(
        warp, z1.values, z1.mask, method="bilinear", return_weights=True
    )
    valid = wmask & z2.mask
    n = int(valid.sum())
    if n == 0:
        raise DegenerateInputError("empty valid intersection between the two views")
    resid = np.where(valid, warped - z2.values, 0.0)
    value = float(np.abs(resid[valid]).mean())
    grads = None
    if want_grad:
        sgn = np.sign(resid) * valid / n
        g1 = np.zeros(z1.values.shape, dtype=np.float64)
        for k in range(weights.shape[0]):
            np.add.at(g1.ravel(), idx[k].ravel(), (weights[k] * sgn).ravel())
        grads = {"z1": g1, "z2": np.zeros(z2.values.shape, dtype=np.float64)}
    return LossValue(value=value, grads=grads)


def bidirectional_consistency(
    z1: DepthMap,
    z2: DepthMap,
    warp_into_1: WarpField,
    warp_into_2: WarpField,
    want_grad: bool = False,
) -> LossValue:
    """Symmetrized form: half the sum of both one-directional losses."""
    fwd = consistency_loss(z1, z2, warp_into_1, want_grad)
    bwd = consistency_loss(z2, z1, warp_into_2, want_grad)
    grads = None
    if want_grad:
        grads = {"z1": 0.5 * fwd.grads["z1"], "z2": 0.5 * bwd.grads["z1"]}
    return LossValue(value=0.5 * (fwd.value + bwd.value), grads=grads)


LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def select_patches(
    rgb: np.ndarray,
    seed: int,
    count: int = 64,
    min_dim_frac: tuple[float, float] = (0.04, 0.08),
    quantile: float = 0.95,
) -> PatchSet:
    """Draw patch centers from the top RGB-gradient quantile.

    Gradient magnitude is the L2 norm of the Sobel response on luma.
    Candidate centers sit at or above the requested percentile; ``count``
    centers are drawn uniformly (without replacement when enough candidates
    exist). Patch sides are uniform in ``min_dim_frac`` times the smaller
    image dimension, then clamped so every window lies inside the image.
    A constant image has no gradient anywhere and yields an empty set.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 3:
        luma = rgb @ np.asarray(LUMA_WEIGHTS)
    elif rgb.ndim == 2:
        luma = rgb
    else:
        raise UsageError(f"expected (H, W, 3) or (H, W) image, got {rgb.shape}")
    if not np.isfinite(luma).all():
        raise UsageError("image must be finite")
    if count < 1:
        raise UsageError("count must be >= 1")
    h, w = luma.shape
    gx = ndimage.sobel(luma, axis=1)
    gy = ndimage.sobel(luma, axis=0)
    mag = np.hypot(gx, gy)
    if mag.max(initial=0.0) <= 0.0:
        return PatchSet(entries=np.zeros((0, 3), dtype=np.int64), seed=seed)
    # zero-response pixels never qualify, even when the percentile collapses
    # to zero on mostly-flat images
    thresh = np.quantile(mag, quantile)
    cand_y, cand_x = np.nonzero((mag >= thresh) & (mag > 0))

    rng = np.random.default_rng(seed)
    replace = cand_x.size < count
    pick = rng.choice(cand_x.size, size=count, replace=replace)
    lo, hi = min_dim_frac
    sizes = np.round(rng.uniform(lo, hi, count) * min(h, w)).astype(np.int64)
    sizes = np.clip(sizes, 4, min(h, w))

    cx = cand_x[pick]
    cy = cand_y[pick]
    x0 = np.clip(cx - sizes // 2, 0, w - sizes)
    y0 = np.clip(cy - sizes // 2, 0, h - sizes)
    entries = np.stack([x0 + sizes // 2, y0 + sizes // 2, sizes], axis=1)
    return PatchSet(entries=entries, seed=seed)


def eg_ssi_loss(
    pred_invdepth: np.ndarray,
    gt_invdepth: np.ndarray,
    gt_mask: np.ndarray | None,
    patches: PatchSet,
    want_grad: bool = False,
    min_valid: int = MIN_VALID_PER_PATCH,
    mad_floor: float = MAD_FLOOR,
) -> LossValue:
    """Edge-guided scale-shift-invariant loss on inverse depth.

    Per patch: standardize prediction and ground truth independently by
    subtracting the median and dividing by the mean absolute deviation (over
    valid pixels only), then take the mean absolute difference. Patches with
    fewer than ``min_valid`` valid pixels or with a MAD below ``mad_floor``
    on either side are skipped; the value is the mean over surviving
    patches. The gradient (key ``"inv_depth"``) differentiates through the
    median and MAD, with zero subgradient at median-selection ties.
    """
    plan = make_work_plan(patches)
    res = run_patch_loss(
        plan,
        pred_invdepth,
        gt_invdepth,
        gt_mask,
        threads=1,
        want_grad=want_grad,
        min_valid=min_valid,
        mad_floor=mad_floor,
    )
    if res.n_survivors == 0:
        raise DegenerateInputError("all patches were skipped")
    grads = {"inv_depth": res.grad} if want_grad else None
    return LossValue(value=res.value, grads=grads)


def uncertainty_l1(
    sigma: np.ndarray,
    z_log_pred: np.ndarray,
    z_log_gt: np.ndarray,
    mask: np.ndarray | None = None,
    want_grad: bool = False,
) -> LossValue:
    """Mean L1 between predicted uncertainty and the absolute log-depth error.

    The error target is detached: the gradient flows only into ``sigma``
    (key ``"sigma"``); the ``"z_log_pred"`` gradient is identically zero.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    zp = np.asarray(z_log_pred, dtype=np.float64)
    zg = np.asarray(z_log_gt, dtype=np.float64)
    if sigma.shape != zp.shape or zp.shape != zg.shape:
        raise UsageError("sigma and log-depth grids must share one shape")
    if mask is None:
        mask = np.ones(sigma.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("empty mask")
    resid = sigma - np.abs(zp - zg)
    value = float(np.abs(resid[mask]).mean())
    grads = None
    if want_grad:
        g = np.where(mask, np.sign(resid) / n, 0.0)
        grads = {"sigma": g, "z_log_pred": np.zeros_like(zp)}
    return LossValue(value=value, grads=grads)


def total_loss(components: dict[str, LossValue], weights: LossWeights = LossWeights()) -> LossValue:
    """Weighted combination: lambda_mse + alpha*consistency + beta*eg_ssi
    + gamma*uncertainty. Gradients combine linearly under their own keys."""
    coeff = {
        "lambda_mse": 1.0,
        "consistency": weights.alpha,
        "eg_ssi": weights.beta,
        "uncertainty": weights.gamma,
    }
    unknown = set(components) - set(coeff)
    if unknown:
        raise UsageError(f"unknown loss components: {sorted(unknown)}")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    any_grads = False
    for name, lv in components.items():
        value += coeff[name] * lv.value
        if lv.grads:
            any_grads = True
            for key, g in lv.grads.items():
                if key in grads:
                    grads[key] = grads[key] + coeff[name] * g
                else:
                    grads[key] = coeff[name] * g
    return LossValue(value=float(value), grads=grads if any_grads else None)
