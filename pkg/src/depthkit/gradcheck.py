"""Finite-difference verification of every analytic loss gradient.

Central differences (step 1e-5, float64) are compared against the analytic
gradients on randomly generated instances. Instances are rejection-sampled
away from non-differentiable points (sign kinks, median ties), which the
seeded generators make deterministic. The relative error of an instance is
``max|analytic - fd| / max(max|fd|, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import compose_warp, sample_augmentation
from .geometry import DepthMap
from .losses import (
    consistency_loss,
    eg_ssi_loss,
    lambda_mse,
    uncertainty_l1,
)
from .patchkernel import PatchSet

__all__ = ["GradCheckResult", "run_gradient_checks", "LOSS_CHECKS"]

FD_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    loss: str
    max_rel_error: float
    instances: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def central_difference(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    flat = g.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        fp = fn(x)
        xf[i] = orig - step
        fm = fn(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * step)
    return g


def rel_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = max(float(np.abs(fd).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - fd).max(initial=0.0)) / denom


def _lattice_jitter(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    """Shuffled lattice values with pairwise gaps >= (hi-lo)/(3n), keeping
    medians and sign terms safely away from FD-step-sized perturbations."""
    base = (np.arange(n) + rng.uniform(0.0, 1.0 / 3.0, n)) / n
    rng.shuffle(base)
    return lo + base * (hi - lo)


def _check_lambda_mse(seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    h, w = 6, 7
    pred = rng.normal(0.0, 1.0, (h, w, 3))
    gt = rng.normal(0.0, 1.0, (h, w, 3))
    mask = rng.uniform(size=(h, w)) < 0.75
    mask.flat[:2] = True
    lam = (1.0, 1.0, 0.15)
    analytic = lambda_mse(pred, gt, mask, lam, want_grad=True).grads["output"]
    fd = central_difference(lambda x: lambda_mse(x, gt, mask, lam).value, pred.copy())
    masked_ok = float(np.abs(analytic[~mask]).max(initial=0.0))
    return rel_error(analytic, fd), masked_ok


def _consistency_instance(seed: int):
    for attempt in range(64):
        rng = np.random.default_rng((seed, attempt))
        a1 = sample_augmentation(rng, (16, 18), (12, 13))
        a2 = sample_augmentation(rng, (16, 18), (10, 11))
        z1 = DepthMap(rng.uniform(2.0, 3.0, (12, 13)))
        z2 = DepthMap(rng.uniform(4.0, 5.0, (10, 11)))
        warp = compose_warp(a1, a2)
        try:
            consistency_loss(z1, z2, warp)
        except Exception:
            continue
        return z1, z2, warp
    raise RuntimeError("could not build a consistency instance")


def _check_consistency(seed: int) -> tuple[float, float]:
    z1, z2, warp = _consistency_instance(seed)
    res = consistency_loss(z1, z2, warp, want_grad=True)
    analytic = res.grads["z1"]

    def value_of(x):
        return consistency_loss(DepthMap(x), z2, warp).value

    fd = central_difference(value_of, np.array(z1.values))
    stopgrad = float(np.abs(res.grads["z2"]).max(initial=0.0))
    return rel_error(analytic, fd), stopgrad


def _egssi_instance(seed: int):
    h, w = 20, 22
    windows = [(3, 3, 8), (12, 4, 7), (5, 13, 8)]  # (y0, x0, size)
    entries = np.array([[x0 + s // 2, y0 + s // 2, s] for y0, x0, s in windows], dtype=np.int64)
    for attempt in range(256):
        rng = np.random.default_rng((seed, attempt))
        pred = _lattice_jitter(rng, h * w, 0.5, 1.5).reshape(h, w)
        gt = _lattice_jitter(rng, h * w, 0.5, 1.5).reshape(h, w)
        mask = rng.uniform(size=(h, w)) < 0.85
        patches = PatchSet(entries=entries, seed=seed)
        try:
            base = eg_ssi_loss(pred, gt, mask, patches, want_grad=True)
        except Exception:
            continue
        # keep every per-pixel |r| term away from the FD step's reach
        degenerate = False
        for y0, x0, s in windows:
            pm = mask[y0:y0 + s, x0:x0 + s]
            pv = pred[y0:y0 + s, x0:x0 + s][pm]
            gv = gt[y0:y0 + s, x0:x0 + s][pm]
            if pv.size < 16:
                degenerate = True
                break
            nu = (pv - np.median(pv)) / np.abs(pv - np.median(pv)).mean()
            nv = (gv - np.median(gv)) / np.abs(gv - np.median(gv)).mean()
            if np.abs(nu - nv).min() < 2e-3:
                degenerate = True
                break
        if degenerate:
            continue
        return pred, gt, mask, patches, base
    raise RuntimeError("could not build a non-degenerate patch-loss instance")


def _check_egssi(seed: int) -> tuple[float, float]:
    pred, gt, mask, patches, base = _egssi_instance(seed)
    analytic = base.grads["inv_depth"]

    inside = np.zeros_like(mask)
    for cx, cy, s in patches.entries:
        inside[cy - s // 2:cy - s // 2 + s, cx - s // 2:cx - s // 2 + s] = True

    def value_of(x):
        return eg_ssi_loss(x, gt, mask, patches).value

    fd = np.zeros_like(analytic)
    sel = np.flatnonzero((inside & mask).ravel())
    flat = pred.ravel()
    for i in sel:
        orig = flat[i]
        flat[i] = orig + FD_STEP
        fp = value_of(pred)
        flat[i] = orig - FD_STEP
        fm = value_of(pred)
        flat[i] = orig
        fd.ravel()[i] = (fp - fm) / (2.0 * FD_STEP)
    outside_ok = float(np.abs(analytic[~(inside & mask)]).max(initial=0.0))
    return rel_error(analytic, fd), outside_ok


def _check_uncertainty(seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    h, w = 8, 9
    zp = rng.uniform(0.0, 1.0, (h, w))
    zg = rng.uniform(0.0, 1.0, (h, w))
    margin = rng.uniform(0.2, 1.0, (h, w)) * rng.choice([-1.0, 1.0], (h, w))
    sigma = np.abs(zp - zg) + margin
    mask = rng.uniform(size=(h, w)) < 0.8
    mask.flat[0] = True
    res = uncertainty_l1(sigma, zp, zg, mask, want_grad=True)
    analytic = res.grads["sigma"]
    fd = central_difference(lambda s: uncertainty_l1(s, zp, zg, mask).value, sigma.copy())
    stopgrad = float(np.abs(res.grads["z_log_pred"]).max(initial=0.0))
    return rel_error(analytic, fd), stopgrad


# name -> per-instance check returning (relative error, side-contract residual)
LOSS_CHECKS = {
    "lambda_mse": _check_lambda_mse,
    "consistency": _check_consistency,
    "eg_ssi": _check_egssi,
    "uncertainty_l1": _check_uncertainty,
}


def run_gradient_checks(
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    instances: int = 50,
    losses: list[str] | None = None,
) -> list[GradCheckResult]:
    results = []
    for name in losses or list(LOSS_CHECKS):
        check = LOSS_CHECKS[name]
        worst = 0.0
        for k in range(instances):
            err, side = check(seed * 10_000 + k)
            worst = max(worst, err, side)
        results.append(GradCheckResult(
            loss=name, max_rel_error=worst, instances=instances, tolerance=tolerance
        ))
    return results
