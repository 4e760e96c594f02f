"""Thin array-in/array-out bindings over the depthkit core.

Training loops hand in contiguous float32/float64 arrays and get scalars
plus gradient arrays back; nothing here is hooked into an autodiff
framework, so callers wire the gradients into their own custom-gradient
nodes. Float32 inputs are staged to float64 exactly once; everything else
runs zero-copy on the caller's buffers. The patch kernel itself releases
the interpreter lock while it runs, so other host threads keep executing.

Errors cross the boundary as this module's typed exceptions: bad shapes or
dtypes raise :class:`InputMismatchError` before any work starts, and core
errors map one-to-one onto :class:`DomainError`,
:class:`DegenerateInputError`, and :class:`UsageError`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

import depthkit
from depthkit import errors as _core_errors
from depthkit.geometry import DepthMap
from depthkit.losses import eg_ssi_loss, select_patches
from depthkit.metrics import AlignmentMode, ause, depth_metrics, spearman

__all__ = [
    "api_version",
    "bound_eg_ssi",
    "bound_metrics",
    "BridgeError",
    "InputMismatchError",
    "DomainError",
    "DegenerateInputError",
    "UsageError",
]

API_VERSION = depthkit.__version__


def api_version() -> str:
    """Version string of the bound core; the bridge tracks it exactly."""
    return API_VERSION


class BridgeError(Exception):
    """Base class for everything raised across the binding boundary."""


class InputMismatchError(BridgeError, ValueError):
    """Array shape or dtype rejected before reaching the core."""


class DomainError(BridgeError, ValueError):
    pass


class DegenerateInputError(BridgeError, ValueError):
    pass


class UsageError(BridgeError, ValueError):
    pass


_ERROR_MAP = {
    _core_errors.DomainError: DomainError,
    _core_errors.DegenerateInputError: DegenerateInputError,
    _core_errors.UsageError: UsageError,
}


@contextmanager
def _mapped_errors():
    try:
        yield
    except tuple(_ERROR_MAP) as exc:
        raise _ERROR_MAP[type(exc)](str(exc)) from exc
    except _core_errors.DepthkitError as exc:
        raise BridgeError(str(exc)) from exc


def _stage(name: str, arr, shape=None, allow_none: bool = False):
    """Validate and stage one array: float32/float64, C-contiguous, staged
    to float64 at most once."""
    if arr is None:
        if allow_none:
            return None
        raise InputMismatchError(f"{name} must not be None")
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise InputMismatchError(f"{name}: expected float32 or float64, got {arr.dtype}")
    if not arr.flags.c_contiguous:
        raise InputMismatchError(f"{name}: expected a C-contiguous array")
    if shape is not None and arr.shape != shape:
        raise InputMismatchError(f"{name}: expected shape {shape}, got {arr.shape}")
    if arr.dtype == np.float32:
        arr = arr.astype(np.float64)
    return arr


def bound_eg_ssi(
    pred_invdepth,
    gt_invdepth,
    mask,
    rgb,
    seed: int,
    count: int = 64,
) -> tuple[float, np.ndarray]:
    """Edge-guided normalized patch loss and its gradient wrt the prediction.

    ``pred_invdepth``/``gt_invdepth`` are (H, W) inverse-depth grids, ``mask``
    an optional (H, W) validity array, ``rgb`` the (H, W, 3) image steering
    patch selection. Returns ``(value, grad)`` with a float64 gradient of
    the input shape.
    """
    pred = _stage("pred_invdepth", pred_invdepth)
    if pred.ndim != 2:
        raise InputMismatchError(f"pred_invdepth: expected a 2-D grid, got shape {pred.shape}")
    gt = _stage("gt_invdepth", gt_invdepth, shape=pred.shape)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != pred.shape:
            raise InputMismatchError(f"mask: expected shape {pred.shape}, got {mask.shape}")
        mask = mask.astype(bool, copy=False)
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[:2] != pred.shape or rgb.shape[2] != 3:
        raise InputMismatchError(
            f"rgb: expected shape {pred.shape + (3,)}, got {rgb.shape}"
        )
    with _mapped_errors():
        patches = select_patches(rgb, seed=seed, count=count)
        result = eg_ssi_loss(pred, gt, mask, patches, want_grad=True)
    return result.value, result.grads["inv_depth"]


_METRIC_KEYS = (
    "delta1", "delta2", "delta3", "arel", "rms", "rms_log", "log10", "si_log", "n_valid",
)


def bound_metrics(pred, gt, sigma=None, align: str = "none") -> dict[str, float]:
    """Benchmark depth metrics (plus uncertainty metrics when ``sigma`` is
    given) as a flat record of scalars.

    Pixels with non-finite or non-positive entries are treated as invalid.
    """
    pred = _stage("pred", pred)
    if pred.ndim != 2:
        raise InputMismatchError(f"pred: expected a 2-D grid, got shape {pred.shape}")
    gt = _stage("gt", gt, shape=pred.shape)
    sigma = _stage("sigma", sigma, shape=pred.shape, allow_none=True)
    with _mapped_errors():
        mode = AlignmentMode.parse(align)
        pred_map = DepthMap(pred)
        gt_map = DepthMap(gt)
        out = dict(zip(_METRIC_KEYS, (
            getattr(depth_metrics(pred_map, gt_map, mode), k) for k in _METRIC_KEYS
        )))
        out["n_valid"] = float(out["n_valid"])
        if sigma is not None:
            a, na, _ = ause(pred_map, gt_map, sigma)
            out["ause"] = a
            out["nause"] = na
            valid = pred_map.mask & gt_map.mask
            err = np.abs(np.log(pred[valid]) - np.log(gt[valid]))
            out["spearman"] = spearman(sigma[valid], err)
    return out
