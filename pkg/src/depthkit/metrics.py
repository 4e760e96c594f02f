"""Benchmark metric protocol: depth accuracy, point-cloud F-score AUC,
camera-ray AUC, uncertainty sparsification, rank correlation, and
scale-invariant boundary F1.

Numbers follow the usual benchmark conventions: delta thresholds at powers
of 1.25, percentages in [0, 100], AUCs in [0, 1]. Each nontrivial metric in
this module is cross-checked in the test suite against an exhaustive
brute-force implementation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, UsageError
from .geometry import AngleMap, DepthMap, PointCloud, _dirs_from_angles

__all__ = [
    "AlignmentMode",
    "DepthMetrics",
    "SparsificationCurve",
    "MetricReport",
    "depth_metrics",
    "fscore_auc",
    "ray_auc",
    "ause",
    "spearman",
    "boundary_f1",
    "aggregate",
]


class AlignmentMode(enum.Enum):
    NONE = "none"
    MEDIAN_SCALE = "median"
    SSI_INVERSE_DEPTH = "ssi"

    @classmethod
    def parse(cls, name: str) -> "AlignmentMode":
        for m in cls:
            if m.value == name:
                return m
        raise UsageError(f"unknown alignment mode {name!r} (use none/median/ssi)")


@dataclass(frozen=True)
class DepthMetrics:
    delta1: float
    delta2: float
    delta3: float
    arel: float
    rms: float
    rms_log: float
    log10: float
    si_log: float
    n_valid: int

    def as_dict(self) -> dict[str, float]:
        return {
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "arel": self.arel,
            "rms": self.rms,
            "rms_log": self.rms_log,
            "log10": self.log10,
            "si_log": self.si_log,
            "n_valid": float(self.n_valid),
        }


@dataclass(frozen=True)
class SparsificationCurve:
    fractions: np.ndarray
    method_delta1: np.ndarray
    oracle_delta1: np.ndarray
    random_delta1: np.ndarray


SI_LOG_LAMBDA = 0.15
DELTA_BASE = 1.25


def _overlap(pred: DepthMap, gt: DepthMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if pred.values.shape != gt.values.shape:
        raise UsageError(f"shape mismatch: {pred.values.shape} vs {gt.values.shape}")
    valid = pred.mask & gt.mask
    return pred.values[valid], gt.values[valid], valid


def _align(d: np.ndarray, g: np.ndarray, mode: AlignmentMode) -> np.ndarray:
    if mode is AlignmentMode.NONE:
        return d
    if mode is AlignmentMode.MEDIAN_SCALE:
        return d * np.median(g / d)
    # scale and shift fitted by least squares in inverse-depth space
    inv_d = 1.0 / d
    inv_g = 1.0 / g
    a_mat = np.stack([inv_d, np.ones_like(inv_d)], axis=1)
    (a, b), *_ = np.linalg.lstsq(a_mat, inv_g, rcond=None)
    return 1.0 / np.maximum(a * inv_d + b, 1e-12)


def depth_metrics(pred: DepthMap, gt: DepthMap, align: AlignmentMode = AlignmentMode.NONE) -> DepthMetrics:
    """The delta/ARel/RMS family plus the scale-invariant log metric.

    deltak is the percentage of pixels whose max depth ratio stays below
    1.25**k; si_log = 100 * sqrt(V[e] + 0.15 * E[e]^2) over log errors e.
    Alignment, when requested, rescales the prediction before every metric.
    """
    d, g, _ = _overlap(pred, gt)
    if d.size < 1:
        raise DegenerateInputError("no overlapping valid pixels")
    d = _align(d, g, align)
    ratio = np.maximum(d / g, g / d)
    deltas = [100.0 * float(np.mean(ratio < DELTA_BASE**k)) for k in (1, 2, 3)]
    e = np.log(d) - np.log(g)
    mean_e = e.mean()
    var_e = ((e - mean_e) ** 2).mean()
    return DepthMetrics(
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        arel=100.0 * float(np.mean(np.abs(d - g) / g)),
        rms=float(np.sqrt(np.mean((d - g) ** 2))),
        rms_log=float(np.sqrt(np.mean(e**2))),
        log10=float(np.mean(np.abs(np.log10(d) - np.log10(g)))),
        si_log=100.0 * float(np.sqrt(var_e + SI_LOG_LAMBDA * mean_e**2)),
        n_valid=int(d.size),
    )


# ---------------------------------------------------------------------------
# point-cloud F-score


def _capped_nn(queries: np.ndarray, points: np.ndarray, radius: float) -> np.ndarray:
    """Distance from each query to its nearest point, exact below ``radius``
    and +inf at or beyond it."""
    from scipy.spatial import cKDTree

    if points.shape[0] == 0 or queries.shape[0] == 0:
        return np.full(queries.shape[0], np.inf)
    dist, _ = cKDTree(points).query(queries, k=1, distance_upper_bound=radius, workers=1)
    return np.where(dist < radius, dist, np.inf)


def fscore_auc(
    pred_cloud: PointCloud,
    gt_cloud: PointCloud,
    d_max: float,
    seed: int = 0,
    n_thresholds: int = 20,
    max_points: int = 25000,
) -> float:
    """Mean F1 over evenly spaced distance thresholds up to d_max / 20.

    A point matches at threshold tau when its nearest neighbor in the other
    cloud lies strictly closer than tau. Clouds above ``max_points`` are
    uniformly subsampled with the given seed.
    """
    if not d_max > 0:
        raise UsageError(f"d_max must be positive, got {d_max}")
    p = pred_cloud.points
    g = gt_cloud.points
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise DegenerateInputError("point clouds must be nonempty")
    rng = np.random.default_rng(seed)
    if p.shape[0] > max_points:
        p = p[rng.choice(p.shape[0], max_points, replace=False)]
    if g.shape[0] > max_points:
        g = g[rng.choice(g.shape[0], max_points, replace=False)]
    tau_max = d_max / 20.0
    taus = tau_max * (np.arange(1, n_thresholds + 1) / n_thresholds)
    dist_p = _capped_nn(p, g, tau_max)
    dist_g = _capped_nn(g, p, tau_max)
    f1 = np.empty(n_thresholds)
    for j, tau in enumerate(taus):
        prec = float(np.mean(dist_p < tau))
        rec = float(np.mean(dist_g < tau))
        f1[j] = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return float(np.mean(f1))


# ---------------------------------------------------------------------------
# camera-ray AUC


RAY_AUC_STEP_DEG = 0.1


def ray_auc(pred: AngleMap, gt: AngleMap, theta_max_deg: float = 15.0) -> float:
    """Area under recall-vs-angular-threshold, thresholds on a 0.1 degree
    grid over [0, theta_max); recall(t) is the fraction of pixels whose ray
    error does not exceed t."""
    if pred.theta.shape != gt.theta.shape:
        raise UsageError("angle maps must share one shape")
    d1 = _dirs_from_angles(pred.theta, pred.phi)
    d2 = _dirs_from_angles(gt.theta, gt.phi)
    cross = np.linalg.norm(np.cross(d1, d2), axis=-1)
    dot = np.sum(d1 * d2, axis=-1)
    err_deg = np.degrees(np.arctan2(cross, dot)).ravel()
    n_steps = int(round(theta_max_deg / RAY_AUC_STEP_DEG))
    grid = np.arange(n_steps) * RAY_AUC_STEP_DEG
    recall = np.searchsorted(np.sort(err_deg), grid, side="right") / err_deg.size
    return float(recall.mean())


# ---------------------------------------------------------------------------
# uncertainty sparsification


AUSE_STEPS = 100


def _delta1_curve(good: np.ndarray, order: np.ndarray, n_steps: int) -> np.ndarray:
    """delta1 (percent) of the kept set after removing the first floor(f*n)
    pixels of ``order`` at each fraction f on the grid."""
    n = good.size
    removed_good = np.r_[0, np.cumsum(good[order])]
    total_good = int(good.sum())
    curve = np.empty(n_steps)
    for k in range(n_steps):
        m = int(np.floor(k / n_steps * n))
        curve[k] = 100.0 * (total_good - removed_good[m]) / (n - m)
    return curve


def ause(
    pred: DepthMap,
    gt: DepthMap,
    sigma: np.ndarray,
    n_steps: int = AUSE_STEPS,
) -> tuple[float, float, SparsificationCurve]:
    """Area under the sparsification error of delta1.

    Pixels are removed most-uncertain-first (method curve) or largest-true-
    log-error-first (oracle curve); ties are broken by pixel index, earlier
    pixels removed first. The random reference is the constant full-set
    delta1. AUSE averages (oracle - method)/100 over the fraction grid
    {0, 1/n_steps, ...}; nAUSE divides by the same average against the
    random curve (1 = uninformative, 0 = oracle).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != pred.values.shape:
        raise UsageError("sigma shape mismatch")
    d, g, valid = _overlap(pred, gt)
    n = d.size
    if n < 100:
        raise DegenerateInputError(f"need >= 100 overlapping valid pixels, got {n}")
    s = sigma[valid]
    err = np.abs(np.log(d) - np.log(g))
    good = (np.maximum(d / g, g / d) < DELTA_BASE).astype(np.int64)

    order_method = np.argsort(-s, kind="stable")
    order_oracle = np.argsort(-err, kind="stable")
    method = _delta1_curve(good, order_method, n_steps)
    oracle = _delta1_curve(good, order_oracle, n_steps)
    random = np.full(n_steps, method[0])

    ause_val = float(np.mean((oracle - method) / 100.0))
    ause_rand = float(np.mean((oracle - random) / 100.0))
    if ause_val == 0.0:
        nause = 0.0
    elif ause_rand == 0.0:
        nause = float("nan")
    else:
        nause = ause_val / ause_rand
    curve = SparsificationCurve(
        fractions=np.arange(n_steps) / n_steps,
        method_delta1=method,
        oracle_delta1=oracle,
        random_delta1=random,
    )
    return ause_val, nause, curve


def _fractional_ranks(x: np.ndarray) -> np.ndarray:
    """Tie-averaged ranks starting at 1."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(sigma_values: np.ndarray, abs_errors: np.ndarray) -> float:
    """Rank correlation: Pearson correlation of tie-averaged ranks."""
    a = np.asarray(sigma_values, dtype=np.float64).ravel()
    b = np.asarray(abs_errors, dtype=np.float64).ravel()
    if a.size != b.size:
        raise UsageError("inputs must have equal length")
    if a.size < 3:
        raise DegenerateInputError(f"need >= 3 samples, got {a.size}")
    ra = _fractional_ranks(a)
    rb = _fractional_ranks(b)
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        raise DegenerateInputError("rank correlation undefined: zero-variance ranks")
    return float(np.corrcoef(ra, rb)[0, 1])


# ---------------------------------------------------------------------------
# boundary F1


BOUNDARY_LEVELS = (5.0, 10.0, 15.0, 20.0, 25.0)


def _pair_ratios(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Max depth ratio of every valid horizontal then vertical 4-neighbor
    pair, flattened in a fixed order shared by prediction and ground truth."""
    h_ok = mask[:, :-1] & mask[:, 1:]
    v_ok = mask[:-1, :] & mask[1:, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        h_a, h_b = values[:, :-1][h_ok], values[:, 1:][h_ok]
        v_a, v_b = values[:-1, :][v_ok], values[1:, :][v_ok]
        h_ratio = np.maximum(h_a / h_b, h_b / h_a)
        v_ratio = np.maximum(v_a / v_b, v_b / v_a)
    return np.concatenate([h_ratio, v_ratio])


def boundary_f1(
    pred: DepthMap,
    gt: DepthMap,
    levels: tuple[float, ...] = BOUNDARY_LEVELS,
) -> float:
    """Scale-invariant boundary F1 (percent).

    The prediction is median-scale aligned, then a 4-neighbor pixel pair is
    a boundary crossing at level t when its max depth ratio exceeds
    1 + t/100. Predicted crossings are matched against ground-truth
    crossings pair-for-pair; the mean F1 over levels with at least one GT
    crossing is reported. No GT crossing at any level makes the metric
    undefined for the image (signaled).
    """
    d, g, _ = _overlap(pred, gt)
    if d.size < 1:
        raise DegenerateInputError("no overlapping valid pixels")
    scale = np.median(g / d)
    both = pred.mask & gt.mask
    pr = _pair_ratios(pred.values * scale, both)
    gr = _pair_ratios(gt.values, both)
    f1s = []
    for t in levels:
        cut = 1.0 + t / 100.0
        p_cross = pr > cut
        g_cross = gr > cut
        n_gt = int(g_cross.sum())
        if n_gt == 0:
            continue
        n_pred = int(p_cross.sum())
        n_match = int((p_cross & g_cross).sum())
        prec = n_match / n_pred if n_pred else 0.0
        rec = n_match / n_gt
        f1s.append(2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    if not f1s:
        raise DegenerateInputError("no ground-truth boundary at any level")
    return 100.0 * float(np.mean(f1s))


# ---------------------------------------------------------------------------
# aggregation and report serialization


METRIC_ORDER = [
    "delta1", "delta2", "delta3", "arel", "rms", "rms_log", "log10", "si_log",
    "n_valid", "fscore_auc", "ray_auc", "ause", "nause", "spearman", "boundary_f1",
]


def _canonical_fields(records: list[dict[str, float]]) -> list[str]:
    seen = set()
    for r in records:
        seen.update(r.keys())
    ordered = [k for k in METRIC_ORDER if k in seen]
    ordered += sorted(seen - set(ordered))
    return ordered


@dataclass
class MetricReport:
    """Dataset-level aggregate: unweighted means with NaN entries excluded."""

    fields: list[str]
    means: dict[str, float]
    excluded: dict[str, int]
    n_images: int
    per_image: list[dict[str, float]] = field(default_factory=list)

    def to_kv(self) -> str:
        lines = [f"n_images {self.n_images}"]
        for k in self.fields:
            lines.append(f"{k} {_fmt(self.means[k])}")
            lines.append(f"{k}_excluded {self.excluded[k]}")
        return "\n".join(lines) + "\n"

    def to_csv(self, delimiter: str = ",") -> str:
        header = delimiter.join(["metric", "mean", "excluded", "n_images"])
        lines = [header]
        for k in self.fields:
            lines.append(
                delimiter.join([k, _fmt(self.means[k]), str(self.excluded[k]), str(self.n_images)])
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max((len(k) for k in self.fields), default=6) + 2
        lines = [f"images: {self.n_images}"]
        for k in self.fields:
            note = f"  (excluded {self.excluded[k]})" if self.excluded[k] else ""
            lines.append(f"{k:<{width}}{_fmt(self.means[k])}{note}")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    if isinstance(x, float) and np.isnan(x):
        return "nan"
    return f"{x:.12g}"


def aggregate(per_image: list[dict[str, float]]) -> MetricReport:
    if not per_image:
        raise DegenerateInputError("need at least one record")
    fields = _canonical_fields(per_image)
    means: dict[str, float] = {}
    excluded: dict[str, int] = {}
    for k in fields:
        vals = np.array([r.get(k, np.nan) for r in per_image], dtype=np.float64)
        finite = np.isfinite(vals)
        excluded[k] = int((~finite).sum())
        means[k] = float(vals[finite].mean()) if finite.any() else float("nan")
    return MetricReport(
        fields=fields,
        means=means,
        excluded=excluded,
        n_images=len(per_image),
        per_image=per_image,
    )
